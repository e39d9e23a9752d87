//! Matrix-free Q1 energy, gradient and Hessian with tensor Gauss quadrature.

use crate::field::{Material, Medium};
use crate::geometry::Grid;

/// Reference data of the Q1 element with 2^d Gauss points on a cell of side h.
#[derive(Clone, Debug)]
pub(crate) struct Element {
    pub d: usize,
    pub nloc: usize,
    /// Physical shape gradients, laid out as `[g][a][k]`.
    pub grad: Vec<f64>,
    /// Shape values, `[g][a]`.
    pub shape: Vec<f64>,
    /// Quadrature weight per Gauss point.
    pub weight: f64,
}

impl Element {
    pub fn new(d: usize, h: f64) -> Self {
        let nloc = 1usize << d;
        let s = 0.5 / 3f64.sqrt();
        let mut grad = vec![0.0; nloc * nloc * d];
        let mut shape = vec![0.0; nloc * nloc];
        for g in 0..nloc {
            let xi: Vec<f64> = (0..d).map(|k| if (g >> k) & 1 == 1 { 0.5 + s } else { 0.5 - s }).collect();
            for a in 0..nloc {
                let f = |k: usize| if (a >> k) & 1 == 1 { xi[k] } else { 1.0 - xi[k] };
                shape[g * nloc + a] = (0..d).map(f).product();
                for k in 0..d {
                    let sign = if (a >> k) & 1 == 1 { 1.0 } else { -1.0 };
                    let rest: f64 = (0..d).filter(|&j| j != k).map(f).product();
                    grad[(g * nloc + a) * d + k] = sign * rest / h;
                }
            }
        }
        Element { d, nloc, grad, shape, weight: h.powi(d as i32) / nloc as f64 }
    }

    #[inline]
    pub fn gradient_at(&self, g: usize, loc: &[f64], out: &mut [f64; 3]) {
        let d = self.d;
        *out = [0.0; 3];
        for a in 0..self.nloc {
            let base = (g * self.nloc + a) * d;
            for k in 0..d {
                out[k] += loc[a] * self.grad[base + k];
            }
        }
    }

    /// Local Hessian `∫ ∇φ_a · 2A ∇φ_b` of the quadratic part of a material.
    pub fn quadratic_stiffness(&self, m: &Material) -> Vec<f64> {
        let (d, n) = (self.d, self.nloc);
        let mut k = vec![0.0; n * n];
        for g in 0..n {
            for a in 0..n {
                for b in 0..n {
                    let mut s = 0.0;
                    for i in 0..d {
                        for j in 0..d {
                            s += self.grad[(g * n + a) * d + i] * 2.0 * m.a[i][j] * self.grad[(g * n + b) * d + j];
                        }
                    }
                    k[a * n + b] += self.weight * s;
                }
            }
        }
        k
    }
}

/// How grid nodes map to unknowns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum DofLayout {
    /// One unknown per node; some may be fixed.
    Nodal,
    /// Opposite faces identified; one unknown per fine cell index.
    Periodic,
}

/// Discrete energy `∫ L(b + Du, x) − q·(b + Du)` over a grid, with background slope `b`.
pub(crate) struct Assembly<'a> {
    pub grid: Grid,
    pub d: usize,
    pub elem: Element,
    pub layout: DofLayout,
    pub dof_dims: [usize; 3],
    pub ndof: usize,
    pub fixed: Option<Vec<bool>>,
    pub materials: &'a [Material],
    pub cell_mat: Vec<u16>,
    pub local_k: Vec<Option<Vec<f64>>>,
    pub all_quadratic: bool,
    pub background: [f64; 3],
    pub tilt: [f64; 3],
    /// Gauss-point Hessians of nonquadratic cells, `[cell][g][d*d]`.
    hess: Vec<f64>,
}

impl<'a> Assembly<'a> {
    pub fn new(
        medium: &'a dyn Medium,
        grid: Grid,
        layout: DofLayout,
        fixed: Option<Vec<bool>>,
        background: [f64; 3],
        tilt: [f64; 3],
    ) -> Self {
        let d = grid.dim();
        let elem = Element::new(d, grid.h());
        let materials = medium.materials();
        let cell_mat: Vec<u16> = (0..grid.n_cells())
            .map(|c| medium.material_index(&grid.unit_cell_of(grid.cell_multi(c))) as u16)
            .collect();
        let local_k = materials
            .iter()
            .map(|m| if m.is_quadratic() { Some(elem.quadratic_stiffness(m)) } else { None })
            .collect();
        let all_quadratic = cell_mat.iter().all(|&m| materials[m as usize].is_quadratic());
        let dof_dims = match layout {
            DofLayout::Nodal => grid.node_dims(),
            DofLayout::Periodic => grid.cell_dims(),
        };
        Assembly {
            grid,
            d,
            elem,
            layout,
            dof_dims,
            ndof: dof_dims.iter().product(),
            fixed,
            materials,
            cell_mat,
            local_k,
            all_quadratic,
            background,
            tilt,
            hess: Vec::new(),
        }
    }

    #[inline]
    pub fn elem_dofs(&self, c: [usize; 3], out: &mut [usize; 8]) {
        let n = self.dof_dims;
        for a in 0..self.elem.nloc {
            let mut idx = [0usize; 3];
            for k in 0..3 {
                let bit = if k < self.d { (a >> k) & 1 } else { 0 };
                idx[k] = c[k] + bit;
                if self.layout == DofLayout::Periodic && k < self.d && idx[k] == n[k] {
                    idx[k] = 0;
                }
            }
            out[a] = idx[0] + n[0] * (idx[1] + n[1] * idx[2]);
        }
    }

    fn for_each_cell(&self, mut f: impl FnMut(usize, [usize; 3], &[usize; 8])) {
        let cd = self.grid.cell_dims();
        let mut dofs = [0usize; 8];
        let mut c = 0;
        for i2 in 0..cd[2] {
            for i1 in 0..cd[1] {
                for i0 in 0..cd[0] {
                    let cm = [i0, i1, i2];
                    self.elem_dofs(cm, &mut dofs);
                    f(c, cm, &dofs);
                    c += 1;
                }
            }
        }
    }

    /// Total (unnormalized) energy.
    pub fn energy(&self, x: &[f64]) -> f64 {
        let d = self.d;
        let nloc = self.elem.nloc;
        let mut total = 0.0;
        let mut comp = 0.0;
        let mut loc = [0.0; 8];
        let mut du = [0.0; 3];
        self.for_each_cell(|c, _, dofs| {
            for a in 0..nloc {
                loc[a] = x[dofs[a]];
            }
            let m = &self.materials[self.cell_mat[c] as usize];
            let mut e = 0.0;
            for g in 0..nloc {
                self.elem.gradient_at(g, &loc, &mut du);
                let mut tq = 0.0;
                for k in 0..d {
                    du[k] += self.background[k];
                    tq += self.tilt[k] * du[k];
                }
                e += m.value(d, &du) - tq;
            }
            // compensated accumulation keeps line-search comparisons meaningful
            let y = e * self.elem.weight - comp;
            let t = total + y;
            comp = (t - total) - y;
            total = t;
        });
        total
    }

    /// Gradient of the total energy; entries at fixed dofs are zeroed.
    pub fn gradient(&self, x: &[f64], out: &mut [f64]) {
        let d = self.d;
        let nloc = self.elem.nloc;
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut loc = [0.0; 8];
        let mut du = [0.0; 3];
        let mut s = [0.0; 3];
        self.for_each_cell(|c, _, dofs| {
            for a in 0..nloc {
                loc[a] = x[dofs[a]];
            }
            let m = &self.materials[self.cell_mat[c] as usize];
            for g in 0..nloc {
                self.elem.gradient_at(g, &loc, &mut du);
                for k in 0..d {
                    du[k] += self.background[k];
                }
                m.gradient(d, &du, &mut s);
                for k in 0..d {
                    s[k] = (s[k] - self.tilt[k]) * self.elem.weight;
                }
                for a in 0..nloc {
                    let base = (g * nloc + a) * d;
                    let mut v = 0.0;
                    for k in 0..d {
                        v += s[k] * self.elem.grad[base + k];
                    }
                    out[dofs[a]] += v;
                }
            }
        });
        self.mask(out);
    }

    pub fn mask(&self, v: &mut [f64]) {
        if let Some(fixed) = &self.fixed {
            for (vi, &f) in v.iter_mut().zip(fixed) {
                if f {
                    *vi = 0.0;
                }
            }
        }
    }

    /// Store Gauss-point Hessians of nonquadratic cells at the state `x`.
    pub fn prepare_hessian(&mut self, x: &[f64]) {
        if self.all_quadratic {
            return;
        }
        let d = self.d;
        let nloc = self.elem.nloc;
        let stride = nloc * d * d;
        let mut hess = vec![0.0; self.grid.n_cells() * stride];
        let mut loc = [0.0; 8];
        let mut du = [0.0; 3];
        self.for_each_cell(|c, _, dofs| {
            let m = &self.materials[self.cell_mat[c] as usize];
            if m.is_quadratic() {
                return;
            }
            for a in 0..nloc {
                loc[a] = x[dofs[a]];
            }
            for g in 0..nloc {
                self.elem.gradient_at(g, &loc, &mut du);
                for k in 0..d {
                    du[k] += self.background[k];
                }
                let off = c * stride + g * d * d;
                m.hessian(d, &du, &mut hess[off..off + d * d]);
            }
        });
        self.hess = hess;
    }

    /// `out = H v` with fixed rows and columns removed.
    pub fn hess_apply(&self, v: &[f64], out: &mut [f64]) {
        let d = self.d;
        let nloc = self.elem.nloc;
        out.iter_mut().for_each(|o| *o = 0.0);
        let mut loc = [0.0; 8];
        let mut du = [0.0; 3];
        let mut s = [0.0; 3];
        self.for_each_cell(|c, _, dofs| {
            for a in 0..nloc {
                loc[a] = v[dofs[a]];
            }
            let mi = self.cell_mat[c] as usize;
            if let Some(k) = &self.local_k[mi] {
                for a in 0..nloc {
                    let row = &k[a * nloc..(a + 1) * nloc];
                    let mut acc = 0.0;
                    for b in 0..nloc {
                        acc += row[b] * loc[b];
                    }
                    out[dofs[a]] += acc;
                }
            } else {
                let stride = nloc * d * d;
                for g in 0..nloc {
                    self.elem.gradient_at(g, &loc, &mut du);
                    let hm = &self.hess[c * stride + g * d * d..c * stride + (g + 1) * d * d];
                    for i in 0..d {
                        let mut acc = 0.0;
                        for j in 0..d {
                            acc += hm[i * d + j] * du[j];
                        }
                        s[i] = acc * self.elem.weight;
                    }
                    for a in 0..nloc {
                        let base = (g * nloc + a) * d;
                        let mut acc = 0.0;
                        for k in 0..d {
                            acc += s[k] * self.elem.grad[base + k];
                        }
                        out[dofs[a]] += acc;
                    }
                }
            }
        });
        self.mask(out);
    }

    /// `∫ (b + Du)` over the grid.
    pub fn slope_integral(&self, x: &[f64]) -> [f64; 3] {
        let d = self.d;
        let nloc = self.elem.nloc;
        let mut acc = [0.0; 3];
        let mut loc = [0.0; 8];
        let mut du = [0.0; 3];
        self.for_each_cell(|_, _, dofs| {
            for a in 0..nloc {
                loc[a] = x[dofs[a]];
            }
            for g in 0..nloc {
                self.elem.gradient_at(g, &loc, &mut du);
                for k in 0..d {
                    acc[k] += (du[k] + self.background[k]) * self.elem.weight;
                }
            }
        });
        acc
    }
}
