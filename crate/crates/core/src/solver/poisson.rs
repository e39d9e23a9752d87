//! Periodic grids, staggered differences and the periodic Poisson solve.

use crate::error::{Error, Result};
use crate::solver::precond::{SpectralKind, SpectralLaplacian};

/// Periodic lattice with `n[k]` distinct nodes per axis and spacing `h`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PeriodicGrid {
    pub dim: usize,
    pub n: [usize; 3],
    pub h: f64,
}

impl PeriodicGrid {
    pub fn new(dim: usize, n: usize, h: f64) -> Self {
        let mut dims = [1usize; 3];
        for d in dims.iter_mut().take(dim) {
            *d = n;
        }
        PeriodicGrid { dim, n: dims, h }
    }

    pub fn len(&self) -> usize {
        self.n.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn multi(&self, idx: usize) -> [usize; 3] {
        [idx % self.n[0], (idx / self.n[0]) % self.n[1], idx / (self.n[0] * self.n[1])]
    }

    pub fn index(&self, i: [usize; 3]) -> usize {
        i[0] + self.n[0] * (i[1] + self.n[1] * i[2])
    }

    /// Index of the neighbor `idx ± e_k` with wraparound.
    #[inline]
    pub fn shift(&self, idx: usize, k: usize, forward: bool) -> usize {
        let mut i = self.multi(idx);
        let n = self.n[k];
        i[k] = if forward { (i[k] + 1) % n } else { (i[k] + n - 1) % n };
        self.index(i)
    }

    /// `(v(x + h e_k) − v(x)) / h`.
    pub fn forward_diff(&self, v: &[f64], k: usize) -> Vec<f64> {
        (0..self.len()).map(|i| (v[self.shift(i, k, true)] - v[i]) / self.h).collect()
    }

    /// `(v(x) − v(x − h e_k)) / h`.
    pub fn backward_diff(&self, v: &[f64], k: usize) -> Vec<f64> {
        (0..self.len()).map(|i| (v[i] - v[self.shift(i, k, false)]) / self.h).collect()
    }

    /// 5-point (7-point) Laplacian `Σ_k ∂_k⁻ ∂_k⁺ v`.
    pub fn laplacian(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        for k in 0..self.dim {
            let fd = self.forward_diff(v, k);
            let bd = self.backward_diff(&fd, k);
            for (o, b) in out.iter_mut().zip(bd) {
                *o += b;
            }
        }
        out
    }

    pub fn mean(&self, v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Solve `−Δ_h w = rhs` on a periodic grid with `w` of mean zero.
pub fn solve_periodic_poisson(rhs: &[f64], grid: &PeriodicGrid) -> Result<Vec<f64>> {
    if rhs.len() != grid.len() {
        return Err(Error::Validation(format!("rhs has {} entries, grid has {}", rhs.len(), grid.len())));
    }
    let scale = rhs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mean = grid.mean(rhs);
    if mean.abs() > 1e-12 * scale.max(f64::MIN_POSITIVE) && mean != 0.0 {
        return Err(Error::Validation(format!("periodic Poisson right side has nonzero mean {mean:.3e}")));
    }
    let lap = SpectralLaplacian::new(grid.dim, grid.n, SpectralKind::Periodic, 1.0 / (grid.h * grid.h));
    let mut w = rhs.to_vec();
    lap.solve(&mut w);
    let m = grid.mean(&w);
    w.iter_mut().for_each(|v| *v -= m);
    let lw = grid.laplacian(&w);
    let rnorm = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
    let res = lw.iter().zip(rhs).map(|(a, b)| (a + b - mean).powi(2)).sum::<f64>().sqrt();
    if res > 1e-10 * rnorm.max(f64::MIN_POSITIVE) && rnorm > 0.0 {
        return Err(Error::Solver { iterations: 1, last_residual: res, residual_history: vec![res] });
    }
    Ok(w)
}
