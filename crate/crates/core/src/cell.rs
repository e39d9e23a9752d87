//! The cell quantities μ(U,q), ν(U,p), the average slope P(U,q) and the
//! error functional 𝓔(U,p), all per unit volume.

use serde::{Deserialize, Serialize};

use crate::effective::EffectiveModel;
use crate::error::{Error, Result};
use crate::field::Medium;
use crate::geometry::{discretize, Cube, Grid};
use crate::solver::{default_tol, minimize, Boundary, DiscreteEnergy, GridFunction, SolveReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    /// Free boundary, tilt `q`.
    Mu,
    /// Affine Dirichlet data `p·x`.
    Nu,
}

#[derive(Clone, Debug)]
pub struct CellProblemResult {
    pub cube: Cube,
    pub kind: CellKind,
    /// `q` for μ, `p` for ν.
    pub vector: Vec<f64>,
    pub value: f64,
    pub minimizer: GridFunction,
    /// `⨏ Dw`; equals `p` for ν.
    pub slope: Vec<f64>,
    pub h: f64,
    pub report: SolveReport,
}

impl CellProblemResult {
    pub fn csv_header(dim: usize) -> Vec<String> {
        let mut h: Vec<String> = ["seed", "n", "trimmed", "kind"].iter().map(|s| s.to_string()).collect();
        h.extend((0..dim).map(|k| format!("vec{k}")));
        h.push("value".into());
        h.extend((0..dim).map(|k| format!("P{k}")));
        h.push("h".into());
        h
    }

    /// `(seed, n, trimmed, kind, p_or_q…, value, P…, h)`.
    pub fn csv_record(&self, seed: u64) -> Vec<String> {
        let kind = match self.kind {
            CellKind::Mu => "mu",
            CellKind::Nu => "nu",
        };
        let mut r = vec![seed.to_string(), self.cube.n.to_string(), self.cube.trimmed.to_string(), kind.to_string()];
        r.extend(self.vector.iter().map(|v| v.to_string()));
        r.push(self.value.to_string());
        r.extend(self.slope.iter().map(|v| v.to_string()));
        r.push(self.h.to_string());
        r
    }
}

fn check_vector(medium: &dyn Medium, v: &[f64], what: &str) -> Result<()> {
    if v.len() != medium.dim() {
        return Err(Error::Validation(format!("{what} has {} components, expected {}", v.len(), medium.dim())));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Validation(format!("{what} must be finite")));
    }
    Ok(())
}

/// μ on an explicit grid (the grid's box plays the role of U).
pub fn mu_on_grid(medium: &dyn Medium, grid: Grid, q: &[f64]) -> Result<(f64, GridFunction, Vec<f64>, SolveReport)> {
    check_vector(medium, q, "q")?;
    let e = DiscreteEnergy::new(medium, grid, q.to_vec(), Boundary::Free);
    let m = minimize(&e, default_tol(medium))?;
    Ok((m.energy, m.solution, m.slope, m.report))
}

/// ν on an explicit grid.
pub fn nu_on_grid(medium: &dyn Medium, grid: Grid, p: &[f64]) -> Result<(f64, GridFunction, SolveReport)> {
    check_vector(medium, p, "p")?;
    let e = DiscreteEnergy::new(medium, grid, vec![0.0; p.len()], Boundary::Affine(p.to_vec()));
    let m = minimize(&e, default_tol(medium))?;
    Ok((m.energy, m.solution, m.report))
}

/// `μ(U,q) = min ⨏ L(Du,x) − q·Du` over all `u`, with the mean-zero minimizer.
pub fn mu(medium: &dyn Medium, cube: &Cube, q: &[f64], h: f64) -> Result<CellProblemResult> {
    let grid = discretize(cube, h)?;
    let (value, minimizer, slope, report) = mu_on_grid(medium, grid, q)?;
    Ok(CellProblemResult { cube: *cube, kind: CellKind::Mu, vector: q.to_vec(), value, minimizer, slope, h, report })
}

/// `ν(U,p) = min ⨏ L(Dv,x)` over `v − ℓ_p` vanishing on the boundary.
pub fn nu(medium: &dyn Medium, cube: &Cube, p: &[f64], h: f64) -> Result<CellProblemResult> {
    let grid = discretize(cube, h)?;
    let (value, minimizer, report) = nu_on_grid(medium, grid, p)?;
    Ok(CellProblemResult {
        cube: *cube,
        kind: CellKind::Nu,
        vector: p.to_vec(),
        value,
        minimizer,
        slope: p.to_vec(),
        h,
        report,
    })
}

/// `ν(U,p) − q·p − μ(U,q)`, nonnegative up to solver tolerance.
pub fn duality_gap(medium: &dyn Medium, cube: &Cube, p: &[f64], q: &[f64], h: f64) -> Result<f64> {
    let n = nu(medium, cube, p, h)?;
    let m = mu(medium, cube, q, h)?;
    let qp: f64 = p.iter().zip(q).map(|(a, b)| a * b).sum();
    Ok(n.value - qp - m.value)
}

/// `3^{-d} Σ μ(child,q) − μ(U,q)`; nonpositive up to tolerance.
pub fn superadditivity_defect(medium: &dyn Medium, cube: &Cube, q: &[f64], h: f64) -> Result<f64> {
    let parent = mu(medium, cube, q, h)?.value;
    let children = cube.subdivide()?;
    let mut acc = crate::harness::KahanSum::default();
    for c in &children {
        acc.add(mu(medium, c, q, h)?.value);
    }
    Ok(acc.value() / children.len() as f64 - parent)
}

/// `ν(U,p) − 3^{-d} Σ ν(child,p)`; nonpositive up to tolerance.
pub fn subadditivity_defect(medium: &dyn Medium, cube: &Cube, p: &[f64], h: f64) -> Result<f64> {
    let parent = nu(medium, cube, p, h)?.value;
    let children = cube.subdivide()?;
    let mut acc = crate::harness::KahanSum::default();
    for c in &children {
        acc.add(nu(medium, c, p, h)?.value);
    }
    Ok(parent - acc.value() / children.len() as f64)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ErrorFunctionalValue {
    pub cube: Cube,
    pub p: Vec<f64>,
    pub value: f64,
    /// `|L̄(p) − μ(U,DL̄(p)) − p·DL̄(p)|`.
    pub mu_gap: f64,
    /// `|L̄(p) − ν(U,p)|`.
    pub nu_gap: f64,
    /// `|U|^{-2/d} ⨏ (v − p·x)² + (u − p·(x − x_U))²`.
    pub flatness: f64,
}

/// The error functional `𝓔(U,p)` against an estimated effective model.
pub fn error_functional(
    medium: &dyn Medium,
    cube: &Cube,
    p: &[f64],
    model: &EffectiveModel,
    h: f64,
) -> Result<ErrorFunctionalValue> {
    let d = medium.dim();
    check_vector(medium, p, "p")?;
    let q = model.effective_gradient(p)?;
    let lbar = model.lbar(p)?;
    let m = mu(medium, cube, &q, h)?;
    let n = nu(medium, cube, p, h)?;
    let pq: f64 = p.iter().zip(&q).map(|(a, b)| a * b).sum();
    let mu_gap = (lbar - m.value - pq).abs();
    let nu_gap = (lbar - n.value).abs();
    let xu = cube.center();
    let lin = |x: &[f64; 3], shift: bool| -> f64 {
        (0..d).map(|k| p[k] * (x[k] - if shift { xu[k] } else { 0.0 })).sum()
    };
    let fv = n.minimizer.gauss_average(|v, _, x| (v - lin(x, false)).powi(2));
    let fu = m.minimizer.gauss_average(|u, _, x| (u - lin(x, true)).powi(2));
    let flatness = (fv + fu) / cube.volume().powf(2.0 / d as f64);
    Ok(ErrorFunctionalValue { cube: *cube, p: p.to_vec(), value: mu_gap + nu_gap + flatness, mu_gap, nu_gap, flatness })
}
