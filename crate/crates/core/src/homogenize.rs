//! Dirichlet-problem error experiments and the mesoscale constructions
//! used as diagnostics: coarsening, Helmholtz–Hodge projection, patching
//! and the L∞ interpolation bound.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cell::{mu, nu_on_grid};
use crate::effective::{fit_rate, homogenized_material, EffectiveModel, RateFit, DEFAULT_MAX_NODES};
use crate::error::{Error, Result};
use crate::field::{sample_field, FieldRealization, HomogeneousMedium, LagrangianSpec, Medium};
use crate::geometry::{discretize, for_each_offset, pow3, triadic_cube, BoxDomain, Cube, Grid};
use crate::harness::{kahan_sum, run_members, Summary};
use crate::solver::{
    default_tol, minimize, solve_periodic_poisson, Boundary, DiscreteEnergy, GridFunction, Minimizer, PeriodicGrid, Role,
};

/// Closed-form boundary datum `g` on `U`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BoundaryDatum {
    /// `g(x) = p·x`.
    Affine { p: Vec<f64> },
    /// `g(x) = p·x + c|x|²`.
    Quadratic { p: Vec<f64>, c: f64 },
    /// `g(x) = p·x + a·sin(2πk x₁)`.
    Sinusoidal { p: Vec<f64>, amplitude: f64, wavenumber: f64 },
}

impl BoundaryDatum {
    fn slope(&self) -> &[f64] {
        match self {
            BoundaryDatum::Affine { p } | BoundaryDatum::Quadratic { p, .. } | BoundaryDatum::Sinusoidal { p, .. } => p,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let p = self.slope();
        if p.len() != dim {
            return Err(Error::Validation(format!("boundary slope has {} components, expected {dim}", p.len())));
        }
        let extra = match self {
            BoundaryDatum::Affine { .. } => vec![],
            BoundaryDatum::Quadratic { c, .. } => vec![*c],
            BoundaryDatum::Sinusoidal { amplitude, wavenumber, .. } => vec![*amplitude, *wavenumber],
        };
        if p.iter().chain(&extra).any(|v| !v.is_finite()) {
            return Err(Error::Validation("boundary datum parameters must be finite".into()));
        }
        Ok(())
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let p = self.slope();
        let lin: f64 = p.iter().zip(x).map(|(a, b)| a * b).sum();
        match self {
            BoundaryDatum::Affine { .. } => lin,
            BoundaryDatum::Quadratic { c, .. } => lin + c * x[..p.len()].iter().map(|v| v * v).sum::<f64>(),
            BoundaryDatum::Sinusoidal { amplitude, wavenumber, .. } => {
                lin + amplitude * (2.0 * std::f64::consts::PI * wavenumber * x[0]).sin()
            }
        }
    }

    /// Bounds on `|∂_k g|` over `(−s/2, s/2)^d`.
    pub fn slope_bounds(&self, side: f64) -> Vec<f64> {
        let p = self.slope();
        match self {
            BoundaryDatum::Affine { .. } => p.iter().map(|v| v.abs()).collect(),
            BoundaryDatum::Quadratic { c, .. } => p.iter().map(|v| v.abs() + c.abs() * side).collect(),
            BoundaryDatum::Sinusoidal { amplitude, wavenumber, .. } => {
                let mut b: Vec<f64> = p.iter().map(|v| v.abs()).collect();
                b[0] += 2.0 * std::f64::consts::PI * (amplitude * wavenumber).abs();
                b
            }
        }
    }

    /// The data bound `M ≥ sup_U |Dg|`.
    pub fn data_bound(&self, side: f64) -> f64 {
        self.slope_bounds(side).iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn default_side() -> u32 {
    1
}

fn default_max_nodes() -> usize {
    DEFAULT_MAX_NODES
}

/// `U = (−s/2, s/2)^d` with data `g` at the scales `ε = 3^{−n}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DirichletExperiment {
    pub spec: LagrangianSpec,
    #[serde(default = "default_side")]
    pub side: u32,
    pub datum: BoundaryDatum,
    /// Exponents `n` with `ε = 3^{−n}`.
    pub scales: Vec<u32>,
    pub samples: usize,
    #[serde(default = "default_max_nodes")]
    pub max_nodes: usize,
}

impl DirichletExperiment {
    pub fn epsilons(&self) -> Vec<f64> {
        self.scales.iter().map(|&n| 1.0 / pow3(n) as f64).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.datum.validate(self.spec.dimension)?;
        if self.side == 0 {
            return Err(Error::Validation("domain side must be a positive integer".into()));
        }
        if self.samples == 0 {
            return Err(Error::Validation("a Dirichlet experiment needs at least one sample".into()));
        }
        if self.scales.is_empty() {
            return Err(Error::Validation("ε-list is empty".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DirichletRow {
    pub epsilon: f64,
    pub sample: usize,
    pub seed: u64,
    /// `⨏_U |u^ε − u_hom|²`.
    pub l2_error: f64,
    /// `max |u^ε − u_hom|` over nodes.
    pub linf_error: f64,
    /// `|⨏ L(Du^ε, x/ε) − ⨏ L̄(Du_hom)|`.
    pub energy_gap: f64,
    /// Heterogeneous energy of `u_hom` minus that of `u^ε`.
    pub het_sandwich: f64,
    /// Homogenized energy of `u^ε` minus that of `u_hom`.
    pub hom_sandwich: f64,
    pub runtime_ms: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DirichletScale {
    pub epsilon: f64,
    pub l2: Summary,
    pub linf: Summary,
    pub gap: Summary,
    pub hom_energy: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DirichletReport {
    pub data_bound: f64,
    pub rows: Vec<DirichletRow>,
    pub scales: Vec<DirichletScale>,
    /// Fit of the mean L² error against `1/ε` (three or more scales).
    pub rate: Option<RateFit>,
    pub min_het_sandwich: f64,
    pub min_hom_sandwich: f64,
    pub failed: usize,
}

impl DirichletReport {
    /// `epsilon,sample,l2_error,linf_error,energy_gap`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epsilon", "sample", "l2_error", "linf_error", "energy_gap"])?;
        for r in &self.rows {
            w.write_record([
                r.epsilon.to_string(),
                r.sample.to_string(),
                r.l2_error.to_string(),
                r.linf_error.to_string(),
                r.energy_gap.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Wall-clock times, kept apart so the result table stays reproducible.
    pub fn write_timing_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epsilon", "sample", "runtime_ms"])?;
        for r in &self.rows {
            w.write_record([r.epsilon.to_string(), r.sample.to_string(), format!("{:.3}", r.runtime_ms)])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Grids, data and homogenized solutions of a Dirichlet experiment, shared by its members.
pub(crate) struct DirichletSetup {
    hom: HomogeneousMedium,
    grids: Vec<Grid>,
    eps: Vec<f64>,
    data: Vec<GridFunction>,
    homs: Vec<Minimizer>,
}

impl DirichletSetup {
    pub(crate) fn new(exp: &DirichletExperiment, model: &EffectiveModel, h: f64) -> Result<Self> {
        exp.validate()?;
        let d = exp.spec.dimension;
        if model.dim != d {
            return Err(Error::Validation(format!("effective model has dimension {}, experiment {d}", model.dim)));
        }
        let side = exp.side as f64;
        let bounds = exp.datum.slope_bounds(side);
        if let Some(b) = bounds.iter().find(|&&b| b > model.p_grid.radius) {
            return Err(Error::Range(format!(
                "boundary slopes up to {b} exceed the effective model range {}",
                model.p_grid.radius
            )));
        }
        let material = homogenized_material(model)?;
        let hom = HomogeneousMedium::new(d, material, model.k0);
        let eps = exp.epsilons();
        let mut grids = Vec::with_capacity(eps.len());
        for (i, &n) in exp.scales.iter().enumerate() {
            let grid = Grid::new(BoxDomain::centered(d, side * pow3(n) as f64 / 2.0), h)?;
            if grid.n_nodes() > exp.max_nodes {
                return Err(Error::Budget {
                    message: format!("ε = 3^-{n} needs {} nodes, budget {}", grid.n_nodes(), exp.max_nodes),
                    completed: exp.scales[..i].to_vec(),
                    partial: None,
                });
            }
            grids.push(grid);
        }
        let data: Vec<GridFunction> = grids
            .iter()
            .zip(&eps)
            .map(|(g, &e)| {
                GridFunction::from_fn(*g, Role::G, |y| {
                    let x: Vec<f64> = y[..d].iter().map(|v| v * e).collect();
                    exp.datum.value(&x) / e
                })
            })
            .collect();
        let homs = grids
            .iter()
            .zip(&data)
            .map(|(g, gf)| {
                minimize(&DiscreteEnergy::new(&hom, *g, vec![0.0; d], Boundary::Dirichlet(gf.clone())), default_tol(&hom))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DirichletSetup { hom, grids, eps, data, homs })
    }

    /// One heterogeneous solve at scale index `k`.
    pub(crate) fn member(&self, spec: &LagrangianSpec, k: usize, sample: usize, seed: u64) -> Result<DirichletRow> {
        let started = Instant::now();
        let d = spec.dimension;
        let (grid, e) = (self.grids[k], self.eps[k]);
        let field = sample_field(spec, seed, grid.domain)?;
        let het_energy = DiscreteEnergy::new(&field, grid, vec![0.0; d], Boundary::Dirichlet(self.data[k].clone()));
        let het = minimize(&het_energy, default_tol(&field))?;
        let uh = &self.homs[k];
        let mut diff = het.solution.clone();
        diff.values.iter_mut().zip(&uh.solution.values).for_each(|(a, b)| *a -= b);
        let hom_energy = DiscreteEnergy::new(&self.hom, grid, vec![0.0; d], Boundary::Dirichlet(self.data[k].clone()));
        Ok(DirichletRow {
            epsilon: e,
            sample,
            seed,
            l2_error: e * e * diff.gauss_average(|v, _, _| v * v),
            linf_error: e * diff.max_abs(),
            energy_gap: (het.energy - uh.energy).abs(),
            het_sandwich: het_energy.evaluate(&uh.solution)? - het.energy,
            hom_sandwich: hom_energy.evaluate(&het.solution)? - uh.energy,
            runtime_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }
}

/// Heterogeneous versus homogenized Dirichlet problems at each `ε`, in the
/// microscopic variable `y = x/ε` where the data become `g(εy)/ε`.
pub fn dirichlet_error(exp: &DirichletExperiment, model: &EffectiveModel, h: f64, seed: u64) -> Result<DirichletReport> {
    let setup = DirichletSetup::new(exp, model, h)?;
    let (eps, homs) = (&setup.eps, &setup.homs);
    let side = exp.side as f64;
    let n_samples = exp.samples;
    let members = run_members(eps.len() * n_samples, seed, |i, s| setup.member(&exp.spec, i / n_samples, i % n_samples, s))?;
    let failed = members.iter().filter(|m| m.outcome.is_err()).count();
    let rows: Vec<DirichletRow> = members.into_iter().filter_map(|m| m.outcome.ok()).collect();
    let scales: Vec<DirichletScale> = eps
        .iter()
        .zip(homs)
        .map(|(&e, uh)| {
            let sel: Vec<&DirichletRow> = rows.iter().filter(|r| r.epsilon == e).collect();
            let col = |f: fn(&DirichletRow) -> f64| Summary::of(&sel.iter().map(|r| f(r)).collect::<Vec<_>>());
            DirichletScale {
                epsilon: e,
                l2: col(|r| r.l2_error),
                linf: col(|r| r.linf_error),
                gap: col(|r| r.energy_gap),
                hom_energy: uh.energy,
            }
        })
        .collect();
    let series: Vec<(f64, f64)> = scales.iter().map(|s| (1.0 / s.epsilon, s.l2.mean)).collect();
    let rate = if series.len() >= 3 && series.iter().all(|(_, v)| *v > 0.0) { Some(fit_rate(&series)?) } else { None };
    let min = |f: fn(&DirichletRow) -> f64| rows.iter().map(f).fold(f64::INFINITY, f64::min);
    Ok(DirichletReport {
        data_bound: exp.datum.data_bound(side),
        min_het_sandwich: min(|r| r.het_sandwich),
        min_hom_sandwich: min(|r| r.hom_sandwich),
        rows,
        scales,
        rate,
        failed,
    })
}

/// `ξ(y) = ⨏_{y+Q_n} u` on the nodes of `v`, for `v` at distance ≥ 3ⁿ from `∂U`.
///
/// The average of the multilinear interpolant over a window of whole fine
/// cells is a tensor trapezoid sum, applied one axis at a time.
pub fn coarsen(u: &GridFunction, n: u32, v: &BoxDomain) -> Result<GridFunction> {
    let grid = u.grid;
    let d = grid.dim();
    if v.dim() != d {
        return Err(Error::Validation("region and grid dimensions differ".into()));
    }
    let s = pow3(n) as f64;
    if !grid.domain.contains_box(&v.grown(s)) {
        return Err(Error::Geometry(format!("region must stay at distance ≥ {s} from the boundary")));
    }
    let hw = pow3(n) as usize * grid.m / 2;
    let nd = grid.node_dims();
    let mut vals = u.values.clone();
    for k in 0..d {
        let stride: usize = nd[..k].iter().product();
        let len = nd[k];
        let mut line = vec![0.0; len];
        let mut prefix = vec![0.0; len + 1];
        for start in 0..vals.len() {
            if (start / stride) % len != 0 {
                continue;
            }
            for (i, l) in line.iter_mut().enumerate() {
                *l = vals[start + i * stride];
            }
            for i in 0..len {
                prefix[i + 1] = prefix[i] + line[i];
            }
            for i in 0..len {
                vals[start + i * stride] = if i >= hw && i + hw < len {
                    let sum = prefix[i + hw + 1] - prefix[i - hw];
                    (sum - 0.5 * (line[i - hw] + line[i + hw])) / (2 * hw) as f64
                } else {
                    f64::NAN
                };
            }
        }
    }
    let sub = Grid::with_cells_per_unit(*v, grid.m);
    GridFunction { grid, values: vals, role: Role::Xi }.restrict(&sub)
}

/// `𝐟 = f̄ + Dw − div 𝐒` on a periodic lattice.
///
/// Staggered layout: `f_i` lives at `x + ½h e_i`, `w` at nodes and `S_ij` at
/// `x + ½h(e_i + e_j)`; `Dw` and `div 𝐒` are the matching one-sided differences.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HelmholtzDecomposition {
    pub fbar: Vec<f64>,
    pub w: Vec<f64>,
    /// `s[i][j]`, with `s[j][i] = −s[i][j]` and zero diagonal.
    pub s: Vec<Vec<Vec<f64>>>,
    /// `max |f − f̄ − Dw + div 𝐒|`.
    pub residual: f64,
    /// `max |S_ij + S_ji|`.
    pub skew_defect: f64,
}

pub fn helmholtz_project(f: &[Vec<f64>], grid: &PeriodicGrid) -> Result<HelmholtzDecomposition> {
    let d = grid.dim;
    if f.len() != d || f.iter().any(|c| c.len() != grid.len()) {
        return Err(Error::Validation(format!("vector field must have {d} components of length {}", grid.len())));
    }
    if f.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Validation("vector field must be finite".into()));
    }
    let fbar: Vec<f64> = f.iter().map(|c| kahan_sum(c.iter().copied()) / c.len() as f64).collect();
    // discrete divergences and curls telescope to zero mean; drop the rounding
    let solve = |mut rhs: Vec<f64>| {
        let m = kahan_sum(rhs.iter().copied()) / rhs.len() as f64;
        rhs.iter_mut().for_each(|v| *v -= m);
        solve_periodic_poisson(&rhs, grid)
    };
    let fc: Vec<Vec<f64>> = f.iter().zip(&fbar).map(|(c, m)| c.iter().map(|v| v - m).collect()).collect();
    let mut div = vec![0.0; grid.len()];
    for (i, c) in fc.iter().enumerate() {
        for (o, b) in div.iter_mut().zip(grid.backward_diff(c, i)) {
            *o -= b;
        }
    }
    let w = solve(div)?;
    let mut s = vec![vec![vec![0.0; grid.len()]; d]; d];
    for i in 0..d {
        for j in i + 1..d {
            let a = grid.forward_diff(&fc[i], j);
            let b = grid.forward_diff(&fc[j], i);
            let rhs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
            let sij = solve(rhs)?;
            s[j][i] = sij.iter().map(|v| -v).collect();
            s[i][j] = sij;
        }
    }
    let mut residual = 0.0f64;
    for i in 0..d {
        let dw = grid.forward_diff(&w, i);
        let mut r: Vec<f64> = f[i].iter().zip(&dw).map(|(fv, g)| fv - fbar[i] - g).collect();
        for (j, sij) in s[i].iter().enumerate() {
            for (o, b) in r.iter_mut().zip(grid.backward_diff(sij, j)) {
                *o += b;
            }
        }
        residual = r.iter().fold(residual, |m, v| m.max(v.abs()));
    }
    let mut skew_defect = 0.0f64;
    for i in 0..d {
        for j in 0..d {
            for (a, b) in s[i][j].iter().zip(&s[j][i]) {
                skew_defect = skew_defect.max((a + b).abs());
            }
        }
    }
    Ok(HelmholtzDecomposition { fbar, w, s, residual, skew_defect })
}

fn default_delta() -> f64 {
    1.0 / 14.0
}

/// Inputs of the patching construction on `Q_{2n}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PatchRequest {
    pub n: u32,
    /// Tilt of the cell problems.
    pub q: Vec<f64>,
    /// Estimate of `P̄_n = E[P(Q_n°, q)]`.
    pub pbar: Vec<f64>,
    pub h: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
}

impl PatchRequest {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Validation("patching needs n ≥ 1".into()));
        }
        if self.q.len() != dim || self.pbar.len() != dim {
            return Err(Error::Validation(format!("q and P̄ must have {dim} components")));
        }
        if self.q.iter().chain(&self.pbar).any(|v| !v.is_finite()) {
            return Err(Error::Validation("q and P̄ must be finite".into()));
        }
        if !(self.delta > 0.0) {
            return Err(Error::Validation("δ must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PatchingArtifacts {
    /// Grid of `Q_{2n}`; its first `N` nodes per axis carry the periodic fields.
    pub grid: Grid,
    pub periodic: PeriodicGrid,
    /// Anchors `z ∈ 3ⁿℤ^d` with `z + Q_{n+1} ⊆ Q_{2n}`.
    pub anchors: Vec<[i64; 3]>,
    /// `max |Σ_z ψ(x − z) − 1|` over the grid before renormalization.
    pub psi_defect: f64,
    /// `ζ = Σ_{z ∈ anchors} ψ(· − z)`.
    pub zeta: GridFunction,
    /// Cutoff on `Q_{2n}°`.
    pub xi: GridFunction,
    pub xi_thickness: f64,
    /// Staggered components of `𝐟`.
    pub f: Vec<Vec<f64>>,
    pub decomposition: HelmholtzDecomposition,
    /// `v = ξw ∈ H¹₀(Q_{2n}°)`.
    pub v: GridFunction,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PatchReport {
    pub n: u32,
    pub seed: u64,
    /// `⨏_{Q_{2n}°} L(P̄_n + Dv, x)`.
    pub candidate_energy: f64,
    /// `ν(Q_{2n}°, P̄_n)`.
    pub nu: f64,
    /// `μ(Q_n, q)`.
    pub mu_n: f64,
    /// `candidate − q·P̄_n − μ(Q_n, q)`: the energy of the tilted integrand `L − q·p` against μ.
    pub gap: f64,
    /// `candidate − ν`, nonnegative by admissibility.
    pub admissibility: f64,
    pub helmholtz_residual: f64,
    pub psi_defect: f64,
    pub xi_thickness: f64,
}

/// CDF of the bump `(15/16)(1 − u²)²` on `[−1, 1]`, evaluated at `2t`.
fn bump_cdf(t: f64) -> f64 {
    let u = (2.0 * t).clamp(-1.0, 1.0);
    0.5 + 15.0 / 16.0 * (u - 2.0 * u.powi(3) / 3.0 + u.powi(5) / 5.0)
}

/// One-dimensional factor of ψ in units of `3ⁿ`: the unit indicator convolved with the bump.
fn psi1(s: f64) -> f64 {
    bump_cdf(s + 0.5) - bump_cdf(s - 0.5)
}

fn psi(x: &[f64], z: &[i64; 3], scale: f64) -> f64 {
    x.iter().enumerate().map(|(k, &v)| psi1((v - z[k] as f64) / scale)).product()
}

/// `Σ_j ψ₁(s − j)` over all integers; 1 up to rounding.
fn psi1_total(s: f64) -> f64 {
    let c = s.round() as i64;
    (c - 2..=c + 2).map(|j| psi1(s - j as f64)).sum()
}

/// Patch the μ-minimizers of the overlapping cubes `z + Q_{n+1}` into an
/// admissible ν-candidate on `Q_{2n}°`.
///
/// The tilt `q` enters through the cell problems; the candidate is compared
/// with ν through the tilted integrand `L(p,x) − q·p`, whose ν differs from the
/// untilted one by the constant `q·P̄_n`.
pub fn patch_candidate(field: &FieldRealization, req: &PatchRequest) -> Result<(PatchReport, PatchingArtifacts)> {
    let d = field.dim();
    req.validate(d)?;
    let n = req.n;
    let origin = vec![0.0; d];
    let big = triadic_cube(d, 2 * n, &origin);
    let grid = discretize(&big, req.h)?;
    if grid.n_nodes() > DEFAULT_MAX_NODES {
        return Err(Error::Budget {
            message: format!("Q_{} needs {} nodes, budget {DEFAULT_MAX_NODES}", 2 * n, grid.n_nodes()),
            completed: vec![],
            partial: None,
        });
    }
    if !field.region.contains_box(&big.to_box()) {
        return Err(Error::Domain("field region does not cover Q_2n".into()));
    }
    let h = grid.h();
    let scale = pow3(n) as f64;
    let cells = grid.cells[0];
    let periodic = PeriodicGrid::new(d, cells, h);
    let reach = (pow3(2 * n) - pow3(n + 1)) / 2 / pow3(n);
    let mut anchors = Vec::new();
    for_each_offset(d, -reach, reach, |off| {
        let mut z = [0i64; 3];
        for k in 0..d {
            z[k] = off[k] * pow3(n);
        }
        anchors.push(z);
    });

    let total = |x: &[f64]| -> f64 { x.iter().map(|v| psi1_total(v / scale)).product() };
    let mut psi_defect = 0.0f64;
    for i in 0..grid.n_nodes() {
        psi_defect = psi_defect.max((total(&grid.node_coord(i)[..d]) - 1.0).abs());
    }
    let weight = |x: &[f64], z: &[i64; 3]| psi(x, z, scale) / total(x);
    let zeta = GridFunction::from_fn(grid, Role::Generic, |x| anchors.iter().map(|z| weight(&x[..d], z)).sum());

    let pidx = |a: [usize; 3]| -> usize {
        let mut b = [0usize; 3];
        for k in 0..d {
            b[k] = a[k] % cells;
        }
        periodic.index(b)
    };
    let mut f = vec![vec![0.0; periodic.len()]; d];
    for z in &anchors {
        let cube = Cube { dim: d, n: n + 1, anchor: *z, trimmed: false };
        let cell = mu(field, &cube, &req.q, req.h)?;
        let sub = cell.minimizer.grid;
        let off = grid.offset_of(&sub).ok_or_else(|| Error::Geometry("overlapping cube not aligned".into()))?;
        let u = &cell.minimizer.values;
        for b in 0..sub.n_nodes() {
            let bm = sub.node_multi(b);
            let mut a = bm;
            for k in 0..d {
                a[k] += off[k];
            }
            let xa = grid.node_coord_multi(a);
            for i in 0..d {
                if bm[i] == sub.cells[i] {
                    continue;
                }
                let mut mid = xa;
                mid[i] += 0.5 * h;
                let wgt = weight(&mid[..d], z);
                if wgt == 0.0 {
                    continue;
                }
                let mut next = bm;
                next[i] += 1;
                let du = (u[sub.node_index(next)] - u[b]) / h;
                f[i][pidx(a)] += wgt * (du - req.pbar[i]);
            }
        }
    }
    let decomposition = helmholtz_project(&f, &periodic)?;

    let inner = big.trimmed()?;
    let tgrid = discretize(&inner, req.h)?;
    let toff = grid.offset_of(&tgrid).ok_or_else(|| Error::Geometry("trimmed grid not aligned".into()))?;
    let half = inner.side() / 2.0;
    let xi_thickness = (pow3(2 * n) as f64).powf(1.0 / (1.0 + req.delta)).min(half);
    let xi = GridFunction::from_fn(tgrid, Role::Xi, |x| {
        (0..d).map(|k| ((half - x[k].abs()) / xi_thickness).clamp(0.0, 1.0)).product()
    });
    let mut v = GridFunction::zeros(tgrid, Role::V);
    for b in 0..tgrid.n_nodes() {
        let bm = tgrid.node_multi(b);
        let mut a = bm;
        for k in 0..d {
            a[k] += toff[k];
        }
        v.values[b] = xi.values[b] * decomposition.w[pidx(a)];
    }

    let mut full = GridFunction::affine(tgrid, Role::V, &req.pbar);
    full.values.iter_mut().zip(&v.values).for_each(|(a, b)| *a += b);
    let candidate_energy =
        DiscreteEnergy::new(field, tgrid, vec![0.0; d], Boundary::Dirichlet(full.clone())).evaluate(&full)?;
    let (nu, _, _) = nu_on_grid(field, tgrid, &req.pbar)?;
    let mu_n = mu(field, &triadic_cube(d, n, &origin), &req.q, req.h)?.value;
    let qp: f64 = req.q.iter().zip(&req.pbar).map(|(a, b)| a * b).sum();
    let report = PatchReport {
        n,
        seed: field.seed,
        candidate_energy,
        nu,
        mu_n,
        gap: candidate_energy - qp - mu_n,
        admissibility: candidate_energy - nu,
        helmholtz_residual: decomposition.residual,
        psi_defect,
        xi_thickness,
    };
    let artifacts = PatchingArtifacts {
        grid,
        periodic,
        anchors,
        psi_defect,
        zeta,
        xi,
        xi_thickness,
        f,
        decomposition,
        v,
    };
    Ok((report, artifacts))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PatchingSummary {
    pub request: PatchRequest,
    pub rows: Vec<PatchReport>,
    pub gap: Summary,
    pub candidate: Summary,
    pub nu: Summary,
    pub mu_n: Summary,
    /// Smallest `candidate − ν` over the ensemble.
    pub min_admissibility: f64,
    pub failed: usize,
}

/// [`patch_candidate`] over an ensemble of realizations on `Q_{2n}`.
pub fn patching_check(spec: &LagrangianSpec, req: &PatchRequest, samples: usize, seed: u64) -> Result<PatchingSummary> {
    spec.validate()?;
    req.validate(spec.dimension)?;
    if samples == 0 {
        return Err(Error::Validation("patching check needs at least one sample".into()));
    }
    let region = triadic_cube(spec.dimension, 2 * req.n, &vec![0.0; spec.dimension]).to_box();
    let members = run_members(samples, seed, |_, s| {
        let field = sample_field(spec, s, region)?;
        Ok(patch_candidate(&field, req)?.0)
    })?;
    let failed = members.iter().filter(|m| m.outcome.is_err()).count();
    let rows: Vec<PatchReport> = members.into_iter().filter_map(|m| m.outcome.ok()).collect();
    let col = |f: fn(&PatchReport) -> f64| Summary::of(&rows.iter().map(f).collect::<Vec<_>>());
    Ok(PatchingSummary {
        request: req.clone(),
        gap: col(|r| r.gap),
        candidate: col(|r| r.candidate_energy),
        nu: col(|r| r.nu),
        mu_n: col(|r| r.mu_n),
        min_admissibility: rows.iter().map(|r| r.admissibility).fold(f64::INFINITY, f64::min),
        rows,
        failed,
    })
}

/// Both sides of the interpolation bound on a discrete ball.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LinftyBound {
    pub nodes: usize,
    pub sup: f64,
    /// `‖u‖_{L²(B_r)}` by nodal quadrature.
    pub l2: f64,
    /// Discrete Hölder seminorm `max |u(x) − u(y)| / |x − y|^γ`.
    pub holder: f64,
    /// `‖u‖_{L²}^{2γ/(2γ+d)} [u]_γ^{d/(2γ+d)}`.
    pub product: f64,
    /// `max(product, rms + [u]_γ (2r)^γ)`.
    pub bound: f64,
}

/// Interpolation bound for `sup_{B_r} |u|` from its L² norm and Hölder seminorm.
///
/// The second term `rms + [u]_γ(2r)^γ` is a bound on its own (some node sits
/// below the root mean square), so the returned value always dominates the
/// measured sup; for constants it reduces to the constant.
pub fn linfty_interpolate(u: &GridFunction, center: &[f64], r: f64, gamma: f64) -> Result<LinftyBound> {
    let grid = u.grid;
    let d = grid.dim();
    if center.len() != d || !(r > 0.0) {
        return Err(Error::Validation("ball needs a center of the grid dimension and r > 0".into()));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Validation(format!("Hölder exponent must lie in (0, 1], got {gamma}")));
    }
    let pts: Vec<([f64; 3], f64)> = (0..grid.n_nodes())
        .filter_map(|i| {
            let x = grid.node_coord(i);
            let dist2: f64 = (0..d).map(|k| (x[k] - center[k]).powi(2)).sum();
            (dist2 <= r * r).then(|| (x, u.values[i]))
        })
        .collect();
    if pts.is_empty() {
        return Err(Error::Geometry("ball contains no grid nodes".into()));
    }
    let hd = grid.h().powi(d as i32);
    let sumsq: f64 = pts.iter().map(|(_, v)| v * v).sum();
    let l2 = (sumsq * hd).sqrt();
    let rms = (sumsq / pts.len() as f64).sqrt();
    let sup = pts.iter().fold(0.0f64, |m, (_, v)| m.max(v.abs()));
    let mut holder = 0.0f64;
    for (a, (xa, va)) in pts.iter().enumerate() {
        for (xb, vb) in &pts[a + 1..] {
            let dist: f64 = (0..d).map(|k| (xa[k] - xb[k]).powi(2)).sum::<f64>().sqrt();
            holder = holder.max((va - vb).abs() / dist.powf(gamma));
        }
    }
    let e = 2.0 * gamma + d as f64;
    let product = l2.powf(2.0 * gamma / e) * holder.powf(d as f64 / e);
    let bound = product.max(rms + holder * (2.0 * r).powf(gamma));
    if sup > bound * (1.0 + 1e-6) {
        return Err(Error::Validation(format!("measured sup {sup} exceeds the interpolation bound {bound}")));
    }
    Ok(LinftyBound { nodes: pts.len(), sup, l2, holder, product, bound })
}
