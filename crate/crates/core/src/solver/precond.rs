//! Fast inverse of the constant-coefficient 5-point (7-point) Laplacian,
//! used as a preconditioner and as the periodic Poisson solver.

use std::sync::Arc;

use rustdct::{DctPlanner, Dst1, TransformType2And3};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

/// Boundary treatment of the tensor Laplacian along every axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpectralKind {
    /// Homogeneous Dirichlet outside the array (DST-I).
    Dirichlet,
    /// Reflecting ends, `tridiag(-1,2,-1)` with corner entries 1 (DCT-II).
    Neumann,
    /// Circulant (FFT).
    Periodic,
}

enum Plans {
    Dirichlet(Vec<Arc<dyn Dst1<f64>>>),
    Neumann(Vec<Arc<dyn TransformType2And3<f64>>>),
    Periodic(Vec<Arc<dyn Fft<f64>>>, Vec<Arc<dyn Fft<f64>>>),
}

/// Solver for `(Σ_k T_k) z = r / scale` on a tensor array, with `T_k` the 1D second difference.
pub struct SpectralLaplacian {
    pub dims: [usize; 3],
    d: usize,
    kind: SpectralKind,
    eig: Vec<Vec<f64>>,
    plans: Plans,
    scale: f64,
}

impl SpectralLaplacian {
    pub fn new(d: usize, dims: [usize; 3], kind: SpectralKind, scale: f64) -> Self {
        let eig: Vec<Vec<f64>> = (0..d)
            .map(|k| {
                let n = dims[k];
                (0..n)
                    .map(|j| {
                        let theta = match kind {
                            SpectralKind::Dirichlet => std::f64::consts::PI * (j + 1) as f64 / (n + 1) as f64,
                            SpectralKind::Neumann => std::f64::consts::PI * j as f64 / n as f64,
                            SpectralKind::Periodic => 2.0 * std::f64::consts::PI * j as f64 / n as f64,
                        };
                        2.0 - 2.0 * theta.cos()
                    })
                    .collect()
            })
            .collect();
        let plans = match kind {
            SpectralKind::Dirichlet => {
                let mut p = DctPlanner::new();
                Plans::Dirichlet((0..d).map(|k| p.plan_dst1(dims[k])).collect())
            }
            SpectralKind::Neumann => {
                let mut p = DctPlanner::new();
                Plans::Neumann((0..d).map(|k| p.plan_dct2(dims[k])).collect())
            }
            SpectralKind::Periodic => {
                let mut p = FftPlanner::new();
                Plans::Periodic(
                    (0..d).map(|k| p.plan_fft_forward(dims[k])).collect(),
                    (0..d).map(|k| p.plan_fft_inverse(dims[k])).collect(),
                )
            }
        };
        SpectralLaplacian { dims, d, kind, eig, plans, scale }
    }

    pub fn len(&self) -> usize {
        self.dims[..self.d].iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn stride(&self, k: usize) -> usize {
        self.dims[..k].iter().product()
    }

    /// Visit every line along axis `k` as (first index, stride).
    fn lines(&self, k: usize) -> Vec<usize> {
        let stride = self.stride(k);
        let n = self.dims[k];
        let total = self.len();
        (0..total).filter(|&i| (i / stride) % n == 0).collect()
    }

    fn denom(&self, idx: usize) -> f64 {
        let mut rem = idx;
        let mut s = 0.0;
        for k in 0..self.d {
            let j = rem % self.dims[k];
            rem /= self.dims[k];
            s += self.eig[k][j];
        }
        s * self.scale
    }

    /// Solve in place. The zero mode (present for Neumann and periodic) is set to zero.
    pub fn solve(&self, buf: &mut [f64]) {
        assert_eq!(buf.len(), self.len());
        match &self.plans {
            Plans::Dirichlet(dst) => {
                for k in 0..self.d {
                    self.real_pass(buf, k, |line| dst[k].process_dst1(line));
                }
                self.divide(buf);
                for k in 0..self.d {
                    let n = self.dims[k] as f64;
                    self.real_pass(buf, k, |line| {
                        dst[k].process_dst1(line);
                        line.iter_mut().for_each(|v| *v *= 2.0 / (n + 1.0));
                    });
                }
            }
            Plans::Neumann(dct) => {
                for k in 0..self.d {
                    self.real_pass(buf, k, |line| dct[k].process_dct2(line));
                }
                self.divide(buf);
                for k in 0..self.d {
                    let n = self.dims[k] as f64;
                    self.real_pass(buf, k, |line| {
                        dct[k].process_dct3(line);
                        line.iter_mut().for_each(|v| *v *= 2.0 / n);
                    });
                }
            }
            Plans::Periodic(fwd, inv) => {
                let mut cbuf: Vec<Complex<f64>> = buf.iter().map(|&v| Complex::new(v, 0.0)).collect();
                for k in 0..self.d {
                    self.complex_pass(&mut cbuf, k, |line| fwd[k].process(line));
                }
                for (i, v) in cbuf.iter_mut().enumerate() {
                    let den = self.denom(i);
                    *v = if den > 0.0 { *v / den } else { Complex::new(0.0, 0.0) };
                }
                for k in 0..self.d {
                    let n = self.dims[k] as f64;
                    self.complex_pass(&mut cbuf, k, |line| {
                        inv[k].process(line);
                        line.iter_mut().for_each(|v| *v /= n);
                    });
                }
                for (b, c) in buf.iter_mut().zip(&cbuf) {
                    *b = c.re;
                }
            }
        }
    }

    fn divide(&self, buf: &mut [f64]) {
        for (i, v) in buf.iter_mut().enumerate() {
            let den = self.denom(i);
            *v = if den > 0.0 { *v / den } else { 0.0 };
        }
    }

    fn real_pass(&self, buf: &mut [f64], k: usize, mut f: impl FnMut(&mut [f64])) {
        let n = self.dims[k];
        let stride = self.stride(k);
        if stride == 1 {
            for line in buf.chunks_mut(n) {
                f(line);
            }
            return;
        }
        let mut line = vec![0.0; n];
        for start in self.lines(k) {
            for j in 0..n {
                line[j] = buf[start + j * stride];
            }
            f(&mut line);
            for j in 0..n {
                buf[start + j * stride] = line[j];
            }
        }
    }

    fn complex_pass(&self, buf: &mut [Complex<f64>], k: usize, mut f: impl FnMut(&mut [Complex<f64>])) {
        let n = self.dims[k];
        let stride = self.stride(k);
        let mut line = vec![Complex::new(0.0, 0.0); n];
        for start in self.lines(k) {
            for j in 0..n {
                line[j] = buf[start + j * stride];
            }
            f(&mut line);
            for j in 0..n {
                buf[start + j * stride] = line[j];
            }
        }
    }

    /// Apply the operator itself (for testing and residuals).
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        let total = self.len();
        for i in 0..total {
            let mut acc = 0.0;
            let mut rem = i;
            for k in 0..self.d {
                let n = self.dims[k];
                let j = rem % n;
                rem /= n;
                let s = self.stride(k);
                let mut diag = 2.0;
                let left = if j > 0 {
                    Some(i - s)
                } else if self.kind == SpectralKind::Periodic {
                    Some(i + (n - 1) * s)
                } else {
                    None
                };
                let right = if j + 1 < n {
                    Some(i + s)
                } else if self.kind == SpectralKind::Periodic {
                    Some(i - (n - 1) * s)
                } else {
                    None
                };
                if self.kind == SpectralKind::Neumann {
                    if left.is_none() {
                        diag -= 1.0;
                    }
                    if right.is_none() {
                        diag -= 1.0;
                    }
                }
                acc += diag * x[i];
                if let Some(l) = left {
                    acc -= x[l];
                }
                if let Some(r) = right {
                    acc -= x[r];
                }
            }
            out[i] = acc * self.scale;
        }
    }
}
