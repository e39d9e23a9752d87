//! Minimization of discretized convex energies on structured grids.

mod assembly;
pub mod poisson;
pub mod precond;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Medium;
use crate::geometry::Grid;
use assembly::{Assembly, DofLayout};
use precond::{SpectralKind, SpectralLaplacian};

pub use poisson::{solve_periodic_poisson, PeriodicGrid};

/// Default tolerance for the quadratic family.
pub const TOL_QUADRATIC: f64 = 1e-10;
/// Default tolerance for the nonlinear family.
pub const TOL_NONLINEAR: f64 = 1e-8;

const MAX_NEWTON: usize = 60;
const MAX_CG: usize = 20_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    U,
    V,
    W,
    G,
    Xi,
    Generic,
}

/// Nodal values of a multilinear function on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFunction {
    pub grid: Grid,
    pub values: Vec<f64>,
    pub role: Role,
}

impl GridFunction {
    pub fn zeros(grid: Grid, role: Role) -> Self {
        GridFunction { values: vec![0.0; grid.n_nodes()], grid, role }
    }

    pub fn from_fn(grid: Grid, role: Role, f: impl Fn(&[f64; 3]) -> f64) -> Self {
        let values = (0..grid.n_nodes()).map(|i| f(&grid.node_coord(i))).collect();
        GridFunction { grid, values, role }
    }

    pub fn affine(grid: Grid, role: Role, p: &[f64]) -> Self {
        let d = grid.dim();
        Self::from_fn(grid, role, |x| (0..d).map(|k| p[k] * x[k]).sum())
    }

    /// Exact integral of the interpolant.
    pub fn integral(&self) -> f64 {
        let w = self.grid.trapezoid_weights();
        kahan_dot(&w, &self.values)
    }

    pub fn mean(&self) -> f64 {
        self.integral() / self.grid.domain.volume()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `⨏ |f(x)|` style average of `g(u, x)` computed with 2^d Gauss points per cell.
    pub fn gauss_average(&self, g: impl Fn(f64, &[f64; 3], &[f64; 3]) -> f64) -> f64 {
        let grid = &self.grid;
        let d = grid.dim();
        let elem = assembly::Element::new(d, grid.h());
        let nloc = elem.nloc;
        let nd = grid.node_dims();
        let mut total = 0.0;
        let mut loc = [0.0; 8];
        let mut du = [0.0; 3];
        let s = 0.5 / 3f64.sqrt();
        for c in 0..grid.n_cells() {
            let cm = grid.cell_multi(c);
            let base = grid.node_coord_multi(cm);
            for a in 0..nloc {
                let mut i = cm;
                for k in 0..d {
                    i[k] += (a >> k) & 1;
                }
                loc[a] = self.values[i[0] + nd[0] * (i[1] + nd[1] * i[2])];
            }
            for gp in 0..nloc {
                elem.gradient_at(gp, &loc, &mut du);
                let mut val = 0.0;
                for a in 0..nloc {
                    val += elem.shape[gp * nloc + a] * loc[a];
                }
                let mut x = base;
                for k in 0..d {
                    let off = if (gp >> k) & 1 == 1 { 0.5 + s } else { 0.5 - s };
                    x[k] += off * grid.h();
                }
                total += elem.weight * g(val, &du, &x);
            }
        }
        total / grid.domain.volume()
    }

    /// `⨏ |Du|²`.
    pub fn dirichlet_energy(&self) -> f64 {
        let d = self.grid.dim();
        self.gauss_average(|_, du, _| du[..d].iter().map(|v| v * v).sum())
    }

    /// Restriction to an aligned subgrid.
    pub fn restrict(&self, sub: &Grid) -> Result<GridFunction> {
        let off = self
            .grid
            .offset_of(sub)
            .ok_or_else(|| Error::Geometry("subgrid is not aligned with the grid".into()))?;
        let values = (0..sub.n_nodes())
            .map(|i| {
                let m = sub.node_multi(i);
                self.values[self.grid.node_index([m[0] + off[0], m[1] + off[1], m[2] + off[2]])]
            })
            .collect();
        Ok(GridFunction { grid: *sub, values, role: self.role })
    }
}

/// Gauss-point gradients of the interpolant of `values` on fine cell `c`.
pub fn gauss_gradients(grid: &Grid, values: &[f64], c: [usize; 3]) -> Vec<[f64; 3]> {
    let d = grid.dim();
    let elem = assembly::Element::new(d, grid.h());
    let nd = grid.node_dims();
    let mut loc = [0.0; 8];
    for a in 0..elem.nloc {
        let mut i = c;
        for k in 0..d {
            i[k] += (a >> k) & 1;
        }
        loc[a] = values[i[0] + nd[0] * (i[1] + nd[1] * i[2])];
    }
    (0..elem.nloc)
        .map(|g| {
            let mut du = [0.0; 3];
            elem.gradient_at(g, &loc, &mut du);
            du
        })
        .collect()
}

pub(crate) fn kahan_dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    let mut c = 0.0;
    for (x, y) in a.iter().zip(b) {
        let v = x * y - c;
        let t = s + v;
        c = (t - s) - v;
        s = t;
    }
    s
}

/// Boundary regime of a discrete energy.
#[derive(Clone, Debug)]
pub enum Boundary {
    /// No constraint; the minimizer is normalized to mean zero.
    Free,
    /// Boundary values `p·x`.
    Affine(Vec<f64>),
    /// Boundary values taken from the function; its interior values seed the iteration.
    Dirichlet(GridFunction),
    /// `w = p·x + φ` with `φ` periodic on the grid box.
    Periodic(Vec<f64>),
}

/// `∫_U L(Dw, x) − q·Dw` over a grid with a boundary regime.
pub struct DiscreteEnergy<'a> {
    pub medium: &'a dyn Medium,
    pub grid: Grid,
    pub tilt: Vec<f64>,
    pub boundary: Boundary,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SolveReport {
    pub newton_steps: usize,
    pub cg_iterations: usize,
    /// Scaled gradient norm after each Newton step.
    pub residual_history: Vec<f64>,
    /// Energy per unit volume along the iteration.
    pub energy_history: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Minimizer {
    pub solution: GridFunction,
    /// Minimal value of the energy per unit volume.
    pub energy: f64,
    /// `⨏ Dw`.
    pub slope: Vec<f64>,
    pub report: SolveReport,
}

/// Default tolerance for a medium: tight for quadratic integrands, looser otherwise.
pub fn default_tol(medium: &dyn Medium) -> f64 {
    if medium.materials().iter().all(|m| m.is_quadratic()) {
        TOL_QUADRATIC
    } else {
        TOL_NONLINEAR
    }
}

impl<'a> DiscreteEnergy<'a> {
    pub fn new(medium: &'a dyn Medium, grid: Grid, tilt: Vec<f64>, boundary: Boundary) -> Self {
        DiscreteEnergy { medium, grid, tilt, boundary }
    }

    fn validate(&self) -> Result<()> {
        let d = self.grid.dim();
        if self.medium.dim() != d {
            return Err(Error::Validation("medium and grid dimensions differ".into()));
        }
        if self.tilt.len() != d {
            return Err(Error::Validation(format!("tilt has {} components, expected {d}", self.tilt.len())));
        }
        if let Some(region) = self.medium.region() {
            if !region.contains_box(&self.grid.domain) {
                return Err(Error::Domain("grid extends outside the field region".into()));
            }
        }
        match &self.boundary {
            Boundary::Affine(p) | Boundary::Periodic(p) if p.len() != d => {
                Err(Error::Validation(format!("slope has {} components, expected {d}", p.len())))
            }
            Boundary::Dirichlet(g) if g.grid != self.grid => {
                Err(Error::Validation("Dirichlet data lives on a different grid".into()))
            }
            _ => Ok(()),
        }
    }

    /// Energy per unit volume of a nodal function (boundary values as given).
    pub fn evaluate(&self, w: &GridFunction) -> Result<f64> {
        self.validate()?;
        let tilt = to3(&self.tilt);
        let asm = Assembly::new(self.medium, self.grid, DofLayout::Nodal, None, [0.0; 3], tilt);
        Ok(asm.energy(&w.values) / self.grid.domain.volume())
    }
}

fn to3(v: &[f64]) -> [f64; 3] {
    let mut o = [0.0; 3];
    o[..v.len()].copy_from_slice(v);
    o
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Preconditioner acting on full dof vectors.
struct Precond {
    lap: SpectralLaplacian,
    /// Dof index of each preconditioner entry.
    map: Vec<usize>,
}

impl Precond {
    fn new(asm: &Assembly) -> Self {
        let d = asm.d;
        let h = asm.grid.h();
        let scale = 2.0 * h.powi(d as i32 - 2);
        let dims = asm.dof_dims;
        match (&asm.fixed, asm.layout) {
            (_, DofLayout::Periodic) => Precond {
                lap: SpectralLaplacian::new(d, dims, SpectralKind::Periodic, scale),
                map: (0..asm.ndof).collect(),
            },
            (None, DofLayout::Nodal) => Precond {
                lap: SpectralLaplacian::new(d, dims, SpectralKind::Neumann, scale),
                map: (0..asm.ndof).collect(),
            },
            (Some(_), DofLayout::Nodal) => {
                let mut inner = [1usize; 3];
                for k in 0..d {
                    inner[k] = dims[k] - 2;
                }
                let lo = |k: usize| if k < d { 1 } else { 0 };
                let mut map = Vec::with_capacity(inner.iter().product());
                for i2 in 0..inner[2] {
                    for i1 in 0..inner[1] {
                        for i0 in 0..inner[0] {
                            let (a, b, c) = (i0 + lo(0), i1 + lo(1), i2 + lo(2));
                            map.push(a + dims[0] * (b + dims[1] * c));
                        }
                    }
                }
                Precond { lap: SpectralLaplacian::new(d, inner, SpectralKind::Dirichlet, scale), map }
            }
        }
    }

    fn apply(&self, r: &[f64], z: &mut [f64]) {
        let mut buf: Vec<f64> = self.map.iter().map(|&i| r[i]).collect();
        self.lap.solve(&mut buf);
        z.iter_mut().for_each(|v| *v = 0.0);
        for (&i, &v) in self.map.iter().zip(&buf) {
            z[i] = v;
        }
    }
}

struct CgOutcome {
    iterations: usize,
    /// Model energy decrements after each iteration (cumulative, negative).
    decrements: Vec<f64>,
}

/// Preconditioned CG for `H x = b` from `x = 0`, stopping at `‖r‖ ≤ abs_tol`.
fn pcg(asm: &Assembly, pre: &Precond, b: &[f64], abs_tol: f64, x: &mut [f64]) -> Result<CgOutcome> {
    let n = b.len();
    x.iter_mut().for_each(|v| *v = 0.0);
    let mut r = b.to_vec();
    let mut z = vec![0.0; n];
    let mut hp = vec![0.0; n];
    pre.apply(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut history = vec![norm(&r)];
    let mut decrements = Vec::new();
    let mut acc = 0.0;
    for it in 0..MAX_CG {
        if *history.last().unwrap() <= abs_tol {
            return Ok(CgOutcome { iterations: it, decrements });
        }
        asm.hess_apply(&p, &mut hp);
        let php = dot(&p, &hp);
        if !(php > 0.0) {
            return Ok(CgOutcome { iterations: it, decrements });
        }
        let alpha = rz / php;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * hp[i];
        }
        acc -= 0.5 * alpha * rz;
        decrements.push(acc);
        pre.apply(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        history.push(norm(&r));
    }
    Err(Error::Solver { iterations: MAX_CG, last_residual: *history.last().unwrap(), residual_history: history })
}

/// Minimize a discrete energy to the scaled gradient tolerance
/// `‖∇E‖₂ / h^d ≤ tol·(1 + |q| + K₀)·√(free dofs)`.
pub fn minimize(energy: &DiscreteEnergy, tol: f64) -> Result<Minimizer> {
    if !(tol > 0.0) {
        return Err(Error::Validation(format!("tolerance must be positive, got {tol}")));
    }
    energy.validate()?;
    let grid = energy.grid;
    let d = grid.dim();
    let tilt = to3(&energy.tilt);
    let (layout, fixed, background, mut x) = match &energy.boundary {
        Boundary::Free => (DofLayout::Nodal, None, [0.0; 3], vec![0.0; grid.n_nodes()]),
        Boundary::Affine(p) => {
            let mask: Vec<bool> = (0..grid.n_nodes()).map(|i| grid.is_boundary(i)).collect();
            (DofLayout::Nodal, Some(mask), [0.0; 3], GridFunction::affine(grid, Role::V, p).values)
        }
        Boundary::Dirichlet(g) => {
            let mask: Vec<bool> = (0..grid.n_nodes()).map(|i| grid.is_boundary(i)).collect();
            (DofLayout::Nodal, Some(mask), [0.0; 3], g.values.clone())
        }
        Boundary::Periodic(p) => (DofLayout::Periodic, None, to3(p), vec![0.0; grid.n_cells()]),
    };
    let mut asm = Assembly::new(energy.medium, grid, layout, fixed, background, tilt);
    let n_free = match &asm.fixed {
        Some(m) => m.iter().filter(|f| !**f).count(),
        None => asm.ndof,
    };
    let volume = grid.domain.volume();
    let hd = grid.h().powi(d as i32);
    let qn = norm(&energy.tilt);
    let target = tol * (1.0 + qn + energy.medium.growth_constant()) * (n_free.max(1) as f64).sqrt();

    let mut report = SolveReport::default();
    let mut g = vec![0.0; asm.ndof];
    let mut step = vec![0.0; asm.ndof];
    let mut trial = vec![0.0; asm.ndof];
    let mut e0 = asm.energy(&x);
    report.energy_history.push(e0 / volume);
    if n_free > 0 {
        let pre = Precond::new(&asm);
        loop {
            asm.gradient(&x, &mut g);
            let res = norm(&g) / hd;
            report.residual_history.push(res);
            if res <= target {
                break;
            }
            if report.newton_steps >= MAX_NEWTON {
                return Err(Error::Solver {
                    iterations: report.newton_steps,
                    last_residual: res,
                    residual_history: report.residual_history,
                });
            }
            asm.prepare_hessian(&x);
            let rhs: Vec<f64> = g.iter().map(|v| -v).collect();
            let inner = if asm.all_quadratic { 0.5 * target * hd } else { (0.1 * target * hd).max(1e-13 * norm(&g)) };
            let out = pcg(&asm, &pre, &rhs, inner, &mut step)
                .or_else(|e| match e {
                    Error::Solver { iterations, last_residual, mut residual_history } => {
                        let mut h = report.residual_history.clone();
                        h.append(&mut residual_history);
                        Err(Error::Solver { iterations, last_residual, residual_history: h })
                    }
                    other => Err(other),
                })?;
            report.cg_iterations += out.iterations;
            if asm.all_quadratic {
                for dec in &out.decrements {
                    report.energy_history.push((e0 + dec) / volume);
                }
            }
            let slope = dot(&g, &step);
            let mut t = 1.0;
            let accepted = loop {
                for i in 0..x.len() {
                    trial[i] = x[i] + t * step[i];
                }
                let e1 = asm.energy(&trial);
                if e1 <= e0 + 1e-4 * t * slope {
                    break Some(e1);
                }
                // at roundoff level the energy cannot resolve the decrease
                if t == 1.0 && (e1 - e0).abs() <= 1e-13 * (e0.abs() + 1.0) {
                    break Some(e1.min(e0));
                }
                t *= 0.5;
                if t < 1e-12 {
                    break None;
                }
            };
            let Some(e1) = accepted else {
                return Err(Error::Solver {
                    iterations: report.newton_steps,
                    last_residual: res,
                    residual_history: report.residual_history,
                });
            };
            std::mem::swap(&mut x, &mut trial);
            e0 = e1;
            report.newton_steps += 1;
            report.energy_history.push(e0 / volume);
        }
    }
    let slope_int = asm.slope_integral(&x);
    let slope: Vec<f64> = slope_int[..d].iter().map(|v| v / volume).collect();
    let role = match energy.boundary {
        Boundary::Free => Role::U,
        Boundary::Affine(_) => Role::V,
        _ => Role::Generic,
    };
    let values = match &energy.boundary {
        Boundary::Periodic(p) => (0..grid.n_nodes())
            .map(|i| {
                let m = grid.node_multi(i);
                let xc = grid.node_coord_multi(m);
                let mut dof = [0usize; 3];
                for k in 0..3 {
                    dof[k] = if k < d && m[k] == grid.cells[k] { 0 } else { m[k] };
                }
                let cd = grid.cell_dims();
                let phi = x[dof[0] + cd[0] * (dof[1] + cd[1] * dof[2])];
                phi + (0..d).map(|k| p[k] * xc[k]).sum::<f64>()
            })
            .collect(),
        _ => x,
    };
    let mut solution = GridFunction { grid, values, role };
    if let Boundary::Free = energy.boundary {
        let mean = solution.mean();
        solution.values.iter_mut().for_each(|v| *v -= mean);
    }
    Ok(Minimizer { solution, energy: e0 / volume, slope, report })
}
