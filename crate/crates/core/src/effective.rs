//! Monte Carlo estimation of μ̄, L̄, P̄ and DL̄, convex-duality checks and
//! algebraic rate fits.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::cell::{mu_on_grid, nu_on_grid};
use crate::error::{Error, Result};
use crate::field::{sample_field, Family, FieldRealization, LagrangianSpec, Mat3, Material};
use crate::geometry::{discretize, pow3, triadic_cube, trimmed_cube, Grid};
use crate::harness::{run_members, successes, Summary};
use crate::solver::{Boundary, DiscreteEnergy, GridFunction};

/// Default node budget for a single cell problem.
pub const DEFAULT_MAX_NODES: usize = 1_000_000;

/// Symmetric axis-aligned lattice `{−R, −R+δ, …, R}^d`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    pub dim: usize,
    pub radius: f64,
    pub spacing: f64,
}

impl Lattice {
    pub fn new(dim: usize, radius: f64, spacing: f64) -> Result<Lattice> {
        let l = Lattice { dim, radius, spacing };
        l.validate()?;
        Ok(l)
    }

    /// Radius 2, spacing ¼.
    pub fn standard(dim: usize) -> Lattice {
        Lattice { dim, radius: 2.0, spacing: 0.25 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim != 2 && self.dim != 3 {
            return Err(Error::Validation(format!("lattice dimension must be 2 or 3, got {}", self.dim)));
        }
        if !(self.spacing > 0.0) || !(self.radius > 0.0) || !self.radius.is_finite() {
            return Err(Error::Validation("lattice radius and spacing must be positive".into()));
        }
        let k = self.radius / self.spacing;
        if (k - k.round()).abs() > 1e-9 * k.max(1.0) {
            return Err(Error::Validation(format!(
                "lattice radius {} is not a multiple of the spacing {}",
                self.radius, self.spacing
            )));
        }
        Ok(())
    }

    pub fn half_count(&self) -> usize {
        (self.radius / self.spacing).round() as usize
    }

    pub fn per_axis(&self) -> usize {
        2 * self.half_count() + 1
    }

    pub fn len(&self) -> usize {
        self.per_axis().pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn multi(&self, i: usize) -> [usize; 3] {
        let n = self.per_axis();
        let mut m = [0; 3];
        let mut rem = i;
        for v in m.iter_mut().take(self.dim) {
            *v = rem % n;
            rem /= n;
        }
        m
    }

    pub fn index(&self, m: [usize; 3]) -> usize {
        let n = self.per_axis();
        (0..self.dim).rev().fold(0, |acc, k| acc * n + m[k])
    }

    pub fn point(&self, i: usize) -> Vec<f64> {
        let m = self.multi(i);
        let k = self.half_count() as f64;
        (0..self.dim).map(|a| (m[a] as f64 - k) * self.spacing).collect()
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }

    /// Index of `−p`.
    pub fn mirror(&self, i: usize) -> usize {
        let n = self.per_axis();
        let mut m = self.multi(i);
        for v in m.iter_mut().take(self.dim) {
            *v = n - 1 - *v;
        }
        self.index(m)
    }

    /// Whether the point sits on the hull boundary.
    pub fn on_boundary(&self, i: usize) -> bool {
        let n = self.per_axis();
        self.multi(i)[..self.dim].iter().any(|&v| v == 0 || v == n - 1)
    }

    /// Lattice index of `p` if `p` is a lattice point.
    pub fn locate(&self, p: &[f64]) -> Option<usize> {
        let k = self.half_count() as f64;
        let mut m = [0usize; 3];
        for a in 0..self.dim {
            let t = p[a] / self.spacing + k;
            if (t - t.round()).abs() > 1e-9 || t.round() < 0.0 || t.round() > 2.0 * k {
                return None;
            }
            m[a] = t.round() as usize;
        }
        Some(self.index(m))
    }

    /// Corners and multilinear weights of the lattice cell containing `p`.
    fn stencil(&self, p: &[f64]) -> Result<Vec<(usize, f64)>> {
        if p.len() != self.dim {
            return Err(Error::Validation(format!("point has {} components, expected {}", p.len(), self.dim)));
        }
        let k = self.half_count();
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..self.dim {
            let t = p[a] / self.spacing + k as f64;
            if !(t >= -1e-9 && t <= 2.0 * k as f64 + 1e-9) {
                return Err(Error::Range(format!("point {p:?} lies outside the tabulated hull of radius {}", self.radius)));
            }
            let t = t.clamp(0.0, 2.0 * k as f64);
            let i = (t.floor() as usize).min(2 * k - 1);
            base[a] = i;
            frac[a] = t - i as f64;
        }
        let mut out = Vec::with_capacity(1 << self.dim);
        for c in 0..(1usize << self.dim) {
            let mut m = base;
            let mut w = 1.0;
            for a in 0..self.dim {
                if (c >> a) & 1 == 1 {
                    m[a] += 1;
                    w *= frac[a];
                } else {
                    w *= 1.0 - frac[a];
                }
            }
            if w > 0.0 {
                out.push((self.index(m), w));
            }
        }
        Ok(out)
    }
}

/// Everything `estimate_effective` needs; serializable as a run descriptor.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EstimateRequest {
    pub spec: LagrangianSpec,
    pub p_grid: Lattice,
    pub q_grid: Lattice,
    pub scales: Vec<u32>,
    pub samples: usize,
    pub h: f64,
    pub seed: u64,
    #[serde(default = "default_max_nodes")]
    pub max_nodes: usize,
}

fn default_max_nodes() -> usize {
    DEFAULT_MAX_NODES
}

/// Ensemble statistics of one scale.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScaleTable {
    pub n: u32,
    /// `E[ν(Q_n,p)]` on the p-grid.
    pub nu_mean: Vec<f64>,
    pub nu_stderr: Vec<f64>,
    /// `E[μ(Q_n,q)]` on the q-grid.
    pub mu_mean: Vec<f64>,
    pub mu_stderr: Vec<f64>,
    /// `P̄_n(q) = E[P(Q_n°,q)]` on the q-grid.
    pub ptrim_mean: Vec<Vec<f64>>,
    /// `E|P(Q_n°,q) − P̄_n(q)|²` on the q-grid.
    pub ptrim_var: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub scales: Vec<u32>,
    pub samples: usize,
    pub h: f64,
    pub seed: u64,
    pub failed_members: usize,
}

/// Tabulated effective quantities with Monte Carlo standard errors.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EffectiveModel {
    pub dim: usize,
    pub family: Family,
    pub lambda: f64,
    pub k0: f64,
    pub p_grid: Lattice,
    pub q_grid: Lattice,
    pub lbar: Vec<f64>,
    pub lbar_stderr: Vec<f64>,
    pub mubar: Vec<f64>,
    pub mubar_stderr: Vec<f64>,
    pub pbar: Vec<Vec<f64>>,
    /// Central differences of the L̄ table; `None` on the hull boundary.
    pub dlbar: Vec<Option<Vec<f64>>>,
    pub scales: Vec<ScaleTable>,
    pub provenance: Provenance,
}

impl EffectiveModel {
    /// A model with exact tables from closed forms (zero standard errors).
    pub fn from_functions(
        family: Family,
        lambda: f64,
        k0: f64,
        p_grid: Lattice,
        q_grid: Lattice,
        lbar: impl Fn(&[f64]) -> f64,
        mubar: impl Fn(&[f64]) -> f64,
        pbar: impl Fn(&[f64]) -> Vec<f64>,
    ) -> EffectiveModel {
        let lb: Vec<f64> = p_grid.points().iter().map(|p| lbar(p)).collect();
        let mb: Vec<f64> = q_grid.points().iter().map(|q| mubar(q)).collect();
        let pb: Vec<Vec<f64>> = q_grid.points().iter().map(|q| pbar(q)).collect();
        let table = ScaleTable {
            n: 0,
            nu_mean: lb.clone(),
            nu_stderr: vec![0.0; lb.len()],
            mu_mean: mb.clone(),
            mu_stderr: vec![0.0; mb.len()],
            ptrim_mean: pb.clone(),
            ptrim_var: vec![0.0; pb.len()],
        };
        Self::assemble(family, lambda, k0, p_grid, q_grid, vec![table], Provenance {
            scales: vec![],
            samples: 0,
            h: 0.0,
            seed: 0,
            failed_members: 0,
        })
    }

    fn assemble(
        family: Family,
        lambda: f64,
        k0: f64,
        p_grid: Lattice,
        q_grid: Lattice,
        scales: Vec<ScaleTable>,
        provenance: Provenance,
    ) -> EffectiveModel {
        let top = scales.last().expect("at least one scale");
        let mut model = EffectiveModel {
            dim: p_grid.dim,
            family,
            lambda,
            k0,
            p_grid,
            q_grid,
            lbar: top.nu_mean.clone(),
            lbar_stderr: top.nu_stderr.clone(),
            mubar: top.mu_mean.clone(),
            mubar_stderr: top.mu_stderr.clone(),
            pbar: top.ptrim_mean.clone(),
            dlbar: Vec::new(),
            scales,
            provenance,
        };
        model.dlbar = (0..p_grid.len()).map(|i| model.central_difference(i)).collect();
        model
    }

    fn central_difference(&self, i: usize) -> Option<Vec<f64>> {
        let g = &self.p_grid;
        if g.on_boundary(i) {
            return None;
        }
        let m = g.multi(i);
        Some(
            (0..g.dim)
                .map(|a| {
                    let mut up = m;
                    let mut dn = m;
                    up[a] += 1;
                    dn[a] -= 1;
                    (self.lbar[g.index(up)] - self.lbar[g.index(dn)]) / (2.0 * g.spacing)
                })
                .collect(),
        )
    }

    /// Multilinear interpolant of the L̄ table.
    pub fn lbar(&self, p: &[f64]) -> Result<f64> {
        Ok(self.p_grid.stencil(p)?.iter().map(|&(i, w)| w * self.lbar[i]).sum())
    }

    /// Multilinear interpolant of the μ̄ table.
    pub fn mubar(&self, q: &[f64]) -> Result<f64> {
        Ok(self.q_grid.stencil(q)?.iter().map(|&(i, w)| w * self.mubar[i]).sum())
    }

    /// Multilinear interpolant of the P̄ table.
    pub fn pbar(&self, q: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        for (i, w) in self.q_grid.stencil(q)? {
            for k in 0..self.dim {
                out[k] += w * self.pbar[i][k];
            }
        }
        Ok(out)
    }

    /// DL̄(p) from central differences, interpolated between interior lattice points.
    pub fn effective_gradient(&self, p: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        for (i, w) in self.p_grid.stencil(p)? {
            let g = self.dlbar[i].as_ref().ok_or_else(|| {
                Error::Range(format!("DL̄ at {p:?} needs lattice points strictly inside the p-grid hull"))
            })?;
            for k in 0..self.dim {
                out[k] += w * g[k];
            }
        }
        Ok(out)
    }

    /// `max |DL̄(p₁) − DL̄(p₂)| / (2Λ|p₁ − p₂|)` over adjacent interior lattice pairs.
    pub fn gradient_lipschitz_ratio(&self) -> f64 {
        let g = &self.p_grid;
        let mut worst = 0.0f64;
        for i in 0..g.len() {
            let Some(a) = &self.dlbar[i] else { continue };
            let m = g.multi(i);
            for k in 0..g.dim {
                let mut up = m;
                up[k] += 1;
                if up[k] >= g.per_axis() {
                    continue;
                }
                if let Some(b) = &self.dlbar[g.index(up)] {
                    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                    worst = worst.max(diff / (2.0 * self.lambda * g.spacing));
                }
            }
        }
        worst
    }

    /// Per-scale means as CSV: `n,kind,index,point…,mean,stderr`.
    pub fn write_scale_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["n".to_string(), "kind".into(), "index".into()];
        header.extend((0..self.dim).map(|k| format!("x{k}")));
        header.extend(["mean".to_string(), "stderr".into()]);
        w.write_record(&header)?;
        for t in &self.scales {
            for (kind, grid, mean, se) in [
                ("nu", &self.p_grid, &t.nu_mean, &t.nu_stderr),
                ("mu", &self.q_grid, &t.mu_mean, &t.mu_stderr),
            ] {
                for i in 0..grid.len() {
                    let mut rec = vec![t.n.to_string(), kind.to_string(), i.to_string()];
                    rec.extend(grid.point(i).iter().map(|v| v.to_string()));
                    rec.push(mean[i].to_string());
                    rec.push(se[i].to_string());
                    w.write_record(&rec)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// One member's values at one scale.
struct ScaleSample {
    nu: Vec<f64>,
    mu: Vec<f64>,
    ptrim: Vec<Vec<f64>>,
}

fn unit(d: usize, k: usize) -> Vec<f64> {
    let mut e = vec![0.0; d];
    e[k] = 1.0;
    e
}

/// Quadratic forms of one realization on one grid: `ν(p) = pᵀNp`, `P(q) = Πq`.
fn quadratic_forms(field: &FieldRealization, grid: Grid, want_nu: bool) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let d = field.spec.dimension;
    let mut nmat = vec![vec![0.0; d]; d];
    if want_nu {
        let vs: Vec<GridFunction> =
            (0..d).map(|k| nu_on_grid(field, grid, &unit(d, k)).map(|r| r.1)).collect::<Result<_>>()?;
        let energy = DiscreteEnergy::new(field, grid, vec![0.0; d], Boundary::Free);
        let diag: Vec<f64> = vs.iter().map(|v| energy.evaluate(v)).collect::<Result<_>>()?;
        for k in 0..d {
            nmat[k][k] = diag[k];
            for l in 0..k {
                let mut s = vs[k].clone();
                for (a, b) in s.values.iter_mut().zip(&vs[l].values) {
                    *a += b;
                }
                let off = 0.5 * (energy.evaluate(&s)? - diag[k] - diag[l]);
                nmat[k][l] = off;
                nmat[l][k] = off;
            }
        }
    }
    let mut pi = vec![vec![0.0; d]; d];
    for l in 0..d {
        let (_, _, slope, _) = mu_on_grid(field, grid, &unit(d, l))?;
        for k in 0..d {
            pi[k][l] = slope[k];
        }
    }
    Ok((nmat, pi))
}

fn quad(m: &[Vec<f64>], x: &[f64]) -> f64 {
    let d = x.len();
    (0..d).map(|k| (0..d).map(|l| x[k] * m[k][l] * x[l]).sum::<f64>()).sum()
}

fn matvec(m: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    m.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

fn member_scale(req: &EstimateRequest, field: &FieldRealization, n: u32) -> Result<ScaleSample> {
    let d = req.spec.dimension;
    let origin = vec![0.0; d];
    let full = discretize(&triadic_cube(d, n, &origin), req.h)?;
    let trim = discretize(&trimmed_cube(d, n, &origin)?, req.h)?;
    let pts_p = req.p_grid.points();
    let pts_q = req.q_grid.points();
    match req.spec.family {
        Family::Quadratic => {
            let (nmat, pi) = quadratic_forms(field, full, true)?;
            let (_, pi_trim) = quadratic_forms(field, trim, false)?;
            Ok(ScaleSample {
                nu: pts_p.iter().map(|p| quad(&nmat, p)).collect(),
                mu: pts_q.iter().map(|q| -0.5 * quad(&pi, q)).collect(),
                ptrim: pts_q.iter().map(|q| matvec(&pi_trim, q)).collect(),
            })
        }
        Family::QuadraticPlusPerturbation => {
            // L(−p,x) = L(p,x), so each value is shared with the mirrored point
            let mut nu = vec![0.0; pts_p.len()];
            for i in 0..pts_p.len() {
                let j = req.p_grid.mirror(i);
                nu[i] = if j < i { nu[j] } else { nu_on_grid(field, full, &pts_p[i])?.0 };
            }
            let mut mu = vec![0.0; pts_q.len()];
            let mut ptrim = vec![Vec::new(); pts_q.len()];
            for i in 0..pts_q.len() {
                let j = req.q_grid.mirror(i);
                if j < i {
                    mu[i] = mu[j];
                    ptrim[i] = ptrim[j].iter().map(|v: &f64| -v).collect();
                } else {
                    mu[i] = mu_on_grid(field, full, &pts_q[i])?.0;
                    ptrim[i] = mu_on_grid(field, trim, &pts_q[i])?.2;
                }
            }
            Ok(ScaleSample { nu, mu, ptrim })
        }
    }
}

fn nodes_of(d: usize, n: u32, h: f64) -> f64 {
    (pow3(n) as f64 / h + 1.0).powi(d as i32)
}

/// Monte Carlo estimates of `E[ν(Q_n,p)]`, `E[μ(Q_n,q)]` and `E[P(Q_n°,q)]`
/// per scale; the largest scale populates the tables.
pub fn estimate_effective(req: &EstimateRequest) -> Result<EffectiveModel> {
    req.spec.validate()?;
    req.p_grid.validate()?;
    req.q_grid.validate()?;
    let d = req.spec.dimension;
    if req.p_grid.dim != d || req.q_grid.dim != d {
        return Err(Error::Validation("lattice dimension differs from the Lagrangian".into()));
    }
    if req.samples < 2 {
        return Err(Error::Validation(format!("need at least 2 samples, got {}", req.samples)));
    }
    if req.scales.is_empty() || req.scales.contains(&0) {
        return Err(Error::Validation("scales must be a nonempty list of integers n ≥ 1".into()));
    }
    crate::geometry::cells_per_unit(req.h)?;
    let mut scales = req.scales.clone();
    scales.sort_unstable();
    scales.dedup();
    let feasible: Vec<u32> =
        scales.iter().copied().take_while(|&n| nodes_of(d, n, req.h) <= req.max_nodes as f64).collect();
    let over = scales.len() > feasible.len();
    if feasible.is_empty() {
        return Err(Error::Budget {
            message: format!("scale {} needs more than {} nodes", scales[0], req.max_nodes),
            completed: vec![],
            partial: None,
        });
    }
    let model = run_scales(req, &feasible)?;
    if over {
        let partial = serde_json::to_string(&model)?;
        return Err(Error::Budget {
            message: format!("scale {} needs more than {} nodes", scales[feasible.len()], req.max_nodes),
            completed: feasible,
            partial: Some(partial),
        });
    }
    Ok(model)
}

fn run_scales(req: &EstimateRequest, scales: &[u32]) -> Result<EffectiveModel> {
    let d = req.spec.dimension;
    let top = *scales.last().unwrap();
    let region = triadic_cube(d, top, &vec![0.0; d]).to_box();
    let members = run_members(req.samples, req.seed, |_, seed| {
        let field = sample_field(&req.spec, seed, region)?;
        scales.iter().map(|&n| member_scale(req, &field, n)).collect::<Result<Vec<_>>>()
    })?;
    let failed = members.iter().filter(|m| m.outcome.is_err()).count();
    let ok = successes(&members);
    if ok.len() < 2 {
        return Err(Error::Ensemble { failed, total: members.len(), first: "fewer than 2 members succeeded".into() });
    }
    let tables = scales
        .iter()
        .enumerate()
        .map(|(s, &n)| {
            let col = |f: &dyn Fn(&ScaleSample) -> f64| -> Summary {
                let xs: Vec<f64> = ok.iter().map(|m| f(&m[s])).collect();
                Summary::of(&xs)
            };
            let nu: Vec<Summary> = (0..req.p_grid.len()).map(|i| col(&|m| m.nu[i])).collect();
            let mu: Vec<Summary> = (0..req.q_grid.len()).map(|i| col(&|m| m.mu[i])).collect();
            let mut ptrim_mean = Vec::with_capacity(req.q_grid.len());
            let mut ptrim_var = Vec::with_capacity(req.q_grid.len());
            for i in 0..req.q_grid.len() {
                let comps: Vec<Summary> = (0..d).map(|k| col(&|m| m.ptrim[i][k])).collect();
                ptrim_mean.push(comps.iter().map(|c| c.mean).collect());
                ptrim_var.push(comps.iter().map(|c| c.variance()).sum());
            }
            ScaleTable {
                n,
                nu_mean: nu.iter().map(|s| s.mean).collect(),
                nu_stderr: nu.iter().map(|s| s.stderr).collect(),
                mu_mean: mu.iter().map(|s| s.mean).collect(),
                mu_stderr: mu.iter().map(|s| s.stderr).collect(),
                ptrim_mean,
                ptrim_var,
            }
        })
        .collect();
    Ok(EffectiveModel::assemble(
        req.spec.family,
        req.spec.lambda,
        req.spec.growth_constant(),
        req.p_grid,
        req.q_grid,
        tables,
        Provenance { scales: scales.to_vec(), samples: req.samples, h: req.h, seed: req.seed, failed_members: failed },
    ))
}

/// One lattice point of a duality check.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DualRow {
    pub point: Vec<f64>,
    pub table_value: f64,
    /// Lattice supremum of the conjugate expression.
    pub sup: f64,
    pub argmax: Vec<f64>,
    /// `L̄(p) − sup_q(p·q + μ̄(q))` or `μ̄(q) + sup_p(p·q − L̄(p))`.
    pub residual: f64,
    /// `Λδ²/4 + 3·stderr` with `δ = √d·spacing` the lattice cell diameter.
    pub budget: f64,
    /// The maximizer lies on the hull boundary.
    pub on_boundary: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DualCheck {
    pub forward: Vec<DualRow>,
    pub reverse: Vec<DualRow>,
    pub warnings: Vec<String>,
}

/// Squared cell diameter `d·spacing²`: a conjugate maximizer can sit at a cell center.
fn mesh(l: &Lattice) -> f64 {
    l.dim as f64 * l.spacing.powi(2)
}

/// Check `L̄(p) = sup_q (p·q + μ̄(q))` and `μ̄(q) = −sup_p (p·q − L̄(p))` on the lattices.
pub fn dual_check(model: &EffectiveModel) -> Result<DualCheck> {
    if model.lbar.len() != model.p_grid.len() || model.mubar.len() != model.q_grid.len() {
        return Err(Error::Validation("effective model tables are not populated".into()));
    }
    let pp = model.p_grid.points();
    let qp = model.q_grid.points();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let forward: Vec<DualRow> = pp
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let (j, sup) = qp
                .iter()
                .enumerate()
                .map(|(j, q)| (j, dot(p, q) + model.mubar[j]))
                .fold((0, f64::NEG_INFINITY), |best, c| if c.1 > best.1 { c } else { best });
            let se = (model.lbar_stderr[i].powi(2) + model.mubar_stderr[j].powi(2)).sqrt();
            DualRow {
                point: p.clone(),
                table_value: model.lbar[i],
                sup,
                argmax: qp[j].clone(),
                residual: model.lbar[i] - sup,
                budget: model.lambda * mesh(&model.q_grid) / 4.0 + 3.0 * se,
                on_boundary: model.q_grid.on_boundary(j),
            }
        })
        .collect();
    let reverse: Vec<DualRow> = qp
        .iter()
        .enumerate()
        .map(|(j, q)| {
            let (i, sup) = pp
                .iter()
                .enumerate()
                .map(|(i, p)| (i, dot(p, q) - model.lbar[i]))
                .fold((0, f64::NEG_INFINITY), |best, c| if c.1 > best.1 { c } else { best });
            let se = (model.lbar_stderr[i].powi(2) + model.mubar_stderr[j].powi(2)).sqrt();
            DualRow {
                point: q.clone(),
                table_value: model.mubar[j],
                sup,
                argmax: pp[i].clone(),
                residual: model.mubar[j] + sup,
                budget: model.lambda * mesh(&model.p_grid) / 4.0 + 3.0 * se,
                on_boundary: model.p_grid.on_boundary(i),
            }
        })
        .collect();
    let mut warnings = Vec::new();
    let fb = forward.iter().filter(|r| r.on_boundary).count();
    if fb > 0 {
        warnings.push(format!(
            "range warning: for {fb} of {} p-points the maximizing q lies on the q-grid boundary",
            forward.len()
        ));
    }
    let rb = reverse.iter().filter(|r| r.on_boundary).count();
    if rb > 0 {
        warnings.push(format!(
            "range warning: for {rb} of {} q-points the maximizing p lies on the p-grid boundary",
            reverse.len()
        ));
    }
    Ok(DualCheck { forward, reverse, warnings })
}

/// DL̄(p); see [`EffectiveModel::effective_gradient`].
pub fn effective_gradient(model: &EffectiveModel, p: &[f64]) -> Result<Vec<f64>> {
    model.effective_gradient(p)
}

/// Least-squares symmetric `Ā` with `L̄(p) ≈ pᵀĀp` over the p-grid.
pub fn fit_quadratic(model: &EffectiveModel) -> Result<Mat3> {
    let (a, _) = fit_form(model, false)?;
    Ok(a)
}

fn fit_form(model: &EffectiveModel, with_perturbation: bool) -> Result<(Mat3, f64)> {
    let d = model.dim;
    let pairs: Vec<(usize, usize)> = (0..d).flat_map(|k| (k..d).map(move |l| (k, l))).collect();
    let nunk = pairs.len() + with_perturbation as usize;
    let pts = model.p_grid.points();
    let mut m = DMatrix::<f64>::zeros(pts.len(), nunk);
    let mut rhs = DVector::<f64>::zeros(pts.len());
    for (r, p) in pts.iter().enumerate() {
        for (c, &(k, l)) in pairs.iter().enumerate() {
            m[(r, c)] = if k == l { p[k] * p[k] } else { 2.0 * p[k] * p[l] };
        }
        if with_perturbation {
            let p2: f64 = p.iter().map(|x| x * x).sum();
            m[(r, pairs.len())] = (1.0 + p2).sqrt() - 1.0;
        }
        rhs[r] = model.lbar[r];
    }
    let sol = m.svd(true, true).solve(&rhs, 1e-12).map_err(|e| Error::Validation(e.to_string()))?;
    let mut a = [[0.0; 3]; 3];
    for (c, &(k, l)) in pairs.iter().enumerate() {
        a[k][l] = sol[c];
        a[l][k] = sol[c];
    }
    let beta = if with_perturbation { sol[pairs.len()] } else { 0.0 };
    Ok((a, beta))
}

/// Constant-coefficient integrand used for homogenized solves: the fitted `pᵀĀp`
/// for the quadratic family, `pᵀĀp + β(√(1+|p|²) − 1)` otherwise.
pub fn homogenized_material(model: &EffectiveModel) -> Result<Material> {
    let (a, beta) = fit_form(model, model.family == Family::QuadraticPlusPerturbation)?;
    let d = model.dim;
    let sym = nalgebra::DMatrix::from_fn(d, d, |i, j| a[i][j]);
    let lo = sym.symmetric_eigenvalues().min();
    if 2.0 * lo + beta.min(0.0) <= 0.0 {
        return Err(Error::Validation(format!("fitted effective integrand is not uniformly convex (λ_min(Ā) = {lo})")));
    }
    Ok(Material { a, kappa: beta, offset: 0.0 })
}

/// Fitted algebraic decay `quantity ≈ C·scale^{−α}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RateFit {
    pub points: Vec<(f64, f64)>,
    pub alpha: f64,
    /// 95% Student-t interval for α.
    pub ci_low: f64,
    pub ci_high: f64,
    /// Root-mean-square residual of the log-log fit.
    pub residual: f64,
    pub log_prefactor: f64,
}

/// Ordinary least squares of `log quantity` against `log scale`; `α̂` is minus the slope.
pub fn fit_rate(series: &[(f64, f64)]) -> Result<RateFit> {
    if series.len() < 3 {
        return Err(Error::Validation(format!("rate fit needs at least 3 points, got {}", series.len())));
    }
    if let Some(bad) = series.iter().find(|(s, v)| !(*s > 0.0) || !(*v > 0.0)) {
        return Err(Error::Validation(format!("rate fit needs positive scales and quantities, got {bad:?}")));
    }
    let xs: Vec<f64> = series.iter().map(|(s, _)| s.ln()).collect();
    let ys: Vec<f64> = series.iter().map(|(_, v)| v.ln()).collect();
    let n = xs.len() as f64;
    let xm = xs.iter().sum::<f64>() / n;
    let ym = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - xm).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Validation("rate fit needs at least two distinct scales".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xm) * (y - ym)).sum();
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let ssr: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let dof = n - 2.0;
    let se = (ssr / dof / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, dof).map_err(|e| Error::Validation(e.to_string()))?.inverse_cdf(0.975);
    let alpha = -slope;
    Ok(RateFit {
        points: series.to_vec(),
        alpha,
        ci_low: alpha - t * se,
        ci_high: alpha + t * se,
        residual: (ssr / n).sqrt(),
        log_prefactor: intercept,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VarianceRow {
    pub n: u32,
    /// `P̄_n = E[P(Q_n°,q)]`.
    pub mean_p: Vec<f64>,
    /// `E|P(Q_n°,q) − E P(Q_n°,q)|²` (sum of componentwise sample variances).
    pub var_p: f64,
    pub mean_mu: f64,
    pub mean_mu_next: f64,
    /// `E[μ(Q_{n+1}°)] − E[μ(Q_n°)]`.
    pub delta_e: f64,
    /// `ΔE + (K₀ + |q|)² 3^{−n}`.
    pub term: f64,
    /// `C·term` with `C` calibrated on the first scale.
    pub bound: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VarianceDecay {
    pub q: Vec<f64>,
    pub constant: f64,
    pub rows: Vec<VarianceRow>,
}

/// Variance of `P(Q_n°,q)` per scale alongside the calibrated right side
/// `C(E[μ(Q_{n+1}°)] − E[μ(Q_n°)] + (K₀+|q|)² 3^{−n})`.
pub fn variance_decay(spec: &LagrangianSpec, q: &[f64], ns: &[u32], samples: usize, h: f64, seed: u64) -> Result<VarianceDecay> {
    spec.validate()?;
    let d = spec.dimension;
    if q.len() != d {
        return Err(Error::Validation(format!("q has {} components, expected {d}", q.len())));
    }
    if samples < 10 {
        return Err(Error::Validation(format!("variance decay needs at least 10 samples, got {samples}")));
    }
    if ns.is_empty() || ns.contains(&0) {
        return Err(Error::Validation("scales must be a nonempty list of integers n ≥ 1".into()));
    }
    let mut all: Vec<u32> = ns.iter().flat_map(|&n| [n, n + 1]).collect();
    all.sort_unstable();
    all.dedup();
    let top = *all.last().unwrap();
    let origin = vec![0.0; d];
    let region = triadic_cube(d, top, &origin).to_box();
    let members = run_members(samples, seed, |_, s| {
        let field = sample_field(spec, s, region)?;
        all.iter()
            .map(|&n| {
                let cube = trimmed_cube(d, n, &origin)?;
                let (value, _, slope, _) = mu_on_grid(&field, discretize(&cube, h)?, q)?;
                Ok((value, slope))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let ok = successes(&members);
    let k0 = spec.growth_constant();
    let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let pos = |n: u32| all.iter().position(|&m| m == n).unwrap();
    let mut rows: Vec<VarianceRow> = ns
        .iter()
        .map(|&n| {
            let a = pos(n);
            let b = pos(n + 1);
            let mean_mu = Summary::of(&ok.iter().map(|m| m[a].0).collect::<Vec<_>>()).mean;
            let mean_mu_next = Summary::of(&ok.iter().map(|m| m[b].0).collect::<Vec<_>>()).mean;
            let comps: Vec<Summary> =
                (0..d).map(|k| Summary::of(&ok.iter().map(|m| m[a].1[k]).collect::<Vec<_>>())).collect();
            let var_p = comps.iter().map(|c| c.variance()).sum();
            let mean_p = comps.iter().map(|c| c.mean).collect();
            let delta_e = mean_mu_next - mean_mu;
            let term = delta_e + (k0 + qn).powi(2) * 3f64.powi(-(n as i32));
            VarianceRow { n, mean_p, var_p, mean_mu, mean_mu_next, delta_e, term, bound: 0.0 }
        })
        .collect();
    let first = &rows[0];
    let constant = if first.term > 0.0 { first.var_p / first.term } else { 0.0 };
    for r in rows.iter_mut() {
        r.bound = constant * r.term;
    }
    Ok(VarianceDecay { q: q.to_vec(), constant, rows })
}
