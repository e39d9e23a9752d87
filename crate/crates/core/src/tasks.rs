//! Member-level jobs dispatched by [`crate::harness::run_ensemble`].
//!
//! Each task kind reads its own parameter blob and produces one row of named
//! values per member:
//!
//! | kind | params | columns |
//! |---|---|---|
//! | `cell` | `spec, cell (mu/nu), n, vector, h, trimmed` | `value, P0..` |
//! | `effective` | `spec, n, p, q, h, trimmed` | `nu, mu, duality_gap` |
//! | `dirichlet` | `experiment` (one scale), `model`, `h` | `l2_error, linf_error, energy_gap, het_sandwich, hom_sandwich` |
//! | `regularity` | `spec, big_r, h, slope, constant` | `y, max_normalized` |
//! | `variance` | `spec, q, n, h` | `mu, P0..` |
//! | `patching` | `spec, request` | `candidate, nu, mu_n, gap, admissibility, helmholtz_residual` |

use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::cell::{mu, nu, CellKind};
use crate::effective::EffectiveModel;
use crate::error::{Error, Result};
use crate::field::{sample_field, LagrangianSpec};
use crate::geometry::{triadic_cube, trimmed_cube, Cube};
use crate::harness::TaskKind;
use crate::homogenize::{patch_candidate, DirichletExperiment, DirichletSetup, PatchRequest};
use crate::regularity::quenched_member;

#[derive(Deserialize)]
struct CellParams {
    spec: LagrangianSpec,
    cell: CellKind,
    n: u32,
    vector: Vec<f64>,
    h: f64,
    #[serde(default)]
    trimmed: bool,
}

#[derive(Deserialize)]
struct EffectiveParams {
    spec: LagrangianSpec,
    n: u32,
    p: Vec<f64>,
    q: Vec<f64>,
    h: f64,
    #[serde(default)]
    trimmed: bool,
}

#[derive(Deserialize)]
struct DirichletParams {
    experiment: DirichletExperiment,
    model: EffectiveModel,
    h: f64,
}

fn default_slope() -> Vec<f64> {
    vec![1.0, 0.0]
}

fn default_constant() -> f64 {
    3.0
}

#[derive(Deserialize)]
struct RegularityParams {
    spec: LagrangianSpec,
    big_r: f64,
    h: f64,
    #[serde(default = "default_slope")]
    slope: Vec<f64>,
    #[serde(default = "default_constant")]
    constant: f64,
}

#[derive(Deserialize)]
struct VarianceParams {
    spec: LagrangianSpec,
    q: Vec<f64>,
    n: u32,
    h: f64,
}

#[derive(Deserialize)]
struct PatchingParams {
    spec: LagrangianSpec,
    request: PatchRequest,
}

enum Job {
    Cell(CellParams),
    Effective(EffectiveParams),
    Dirichlet(Box<DirichletParams>, DirichletSetup),
    Regularity(RegularityParams),
    Variance(VarianceParams),
    Patching(PatchingParams),
}

/// A validated task ready to run members.
pub struct MemberJob {
    job: Job,
}

fn decode<T: DeserializeOwned>(kind: TaskKind, params: &serde_json::Value) -> Result<T> {
    T::deserialize(params).map_err(|e| Error::Validation(format!("{kind:?} task parameters: {e}")))
}

fn cube(d: usize, n: u32, trimmed: bool) -> Result<Cube> {
    let origin = vec![0.0; d];
    if trimmed {
        trimmed_cube(d, n, &origin)
    } else {
        Ok(triadic_cube(d, n, &origin))
    }
}

fn check_len(v: &[f64], d: usize, what: &str) -> Result<()> {
    if v.len() != d {
        return Err(Error::Validation(format!("{what} has {} components, expected {d}", v.len())));
    }
    Ok(())
}

impl MemberJob {
    pub fn parse(kind: TaskKind, params: &serde_json::Value) -> Result<MemberJob> {
        let job = match kind {
            TaskKind::Cell => {
                let p: CellParams = decode(kind, params)?;
                p.spec.validate()?;
                check_len(&p.vector, p.spec.dimension, "vector")?;
                Job::Cell(p)
            }
            TaskKind::Effective => {
                let p: EffectiveParams = decode(kind, params)?;
                p.spec.validate()?;
                check_len(&p.p, p.spec.dimension, "p")?;
                check_len(&p.q, p.spec.dimension, "q")?;
                Job::Effective(p)
            }
            TaskKind::Dirichlet => {
                let p: DirichletParams = decode(kind, params)?;
                if p.experiment.scales.len() != 1 {
                    return Err(Error::Validation("a dirichlet task runs exactly one scale".into()));
                }
                let setup = DirichletSetup::new(&p.experiment, &p.model, p.h)?;
                Job::Dirichlet(Box::new(p), setup)
            }
            TaskKind::Regularity => {
                let p: RegularityParams = decode(kind, params)?;
                p.spec.validate()?;
                check_len(&p.slope, p.spec.dimension, "slope")?;
                if !(p.big_r >= 2.0) || (2.0 * p.big_r).fract() != 0.0 {
                    return Err(Error::Validation("big_r must be a multiple of ½ and at least 2".into()));
                }
                if !(p.constant > 0.0) {
                    return Err(Error::Validation("calibration constant must be positive".into()));
                }
                Job::Regularity(p)
            }
            TaskKind::Variance => {
                let p: VarianceParams = decode(kind, params)?;
                p.spec.validate()?;
                check_len(&p.q, p.spec.dimension, "q")?;
                if p.n == 0 {
                    return Err(Error::Validation("trimmed cubes need n ≥ 1".into()));
                }
                Job::Variance(p)
            }
            TaskKind::Patching => {
                let p: PatchingParams = decode(kind, params)?;
                p.spec.validate()?;
                p.request.validate(p.spec.dimension)?;
                Job::Patching(p)
            }
        };
        Ok(MemberJob { job })
    }

    pub fn columns(&self) -> Vec<String> {
        let slope = |head: &str, d: usize| {
            let mut c = vec![head.to_string()];
            c.extend((0..d).map(|k| format!("P{k}")));
            c
        };
        let names = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        match &self.job {
            Job::Cell(p) => slope("value", p.spec.dimension),
            Job::Effective(_) => names(&["nu", "mu", "duality_gap"]),
            Job::Dirichlet(..) => names(&["l2_error", "linf_error", "energy_gap", "het_sandwich", "hom_sandwich"]),
            Job::Regularity(_) => names(&["y", "max_normalized"]),
            Job::Variance(p) => slope("mu", p.spec.dimension),
            Job::Patching(_) => names(&["candidate", "nu", "mu_n", "gap", "admissibility", "helmholtz_residual"]),
        }
    }

    pub fn run(&self, index: usize, seed: u64) -> Result<Vec<f64>> {
        match &self.job {
            Job::Cell(p) => {
                let c = cube(p.spec.dimension, p.n, p.trimmed)?;
                let field = sample_field(&p.spec, seed, c.to_box())?;
                let r = match p.cell {
                    CellKind::Mu => mu(&field, &c, &p.vector, p.h)?,
                    CellKind::Nu => nu(&field, &c, &p.vector, p.h)?,
                };
                let mut row = vec![r.value];
                row.extend(r.slope);
                Ok(row)
            }
            Job::Effective(p) => {
                let c = cube(p.spec.dimension, p.n, p.trimmed)?;
                let field = sample_field(&p.spec, seed, c.to_box())?;
                let v = nu(&field, &c, &p.p, p.h)?.value;
                let m = mu(&field, &c, &p.q, p.h)?.value;
                let pq: f64 = p.p.iter().zip(&p.q).map(|(a, b)| a * b).sum();
                Ok(vec![v, m, v - m - pq])
            }
            Job::Dirichlet(p, setup) => {
                let r = setup.member(&p.experiment.spec, 0, index, seed)?;
                Ok(vec![r.l2_error, r.linf_error, r.energy_gap, r.het_sandwich, r.hom_sandwich])
            }
            Job::Regularity(p) => {
                let m = p.slope.iter().map(|v| v * v).sum::<f64>().sqrt() + 0.2;
                let r = quenched_member(&p.spec, p.big_r, &p.slope, p.h, p.constant * m, seed)?;
                Ok(vec![r.y, r.max_normalized])
            }
            Job::Variance(p) => {
                let c = trimmed_cube(p.spec.dimension, p.n, &vec![0.0; p.spec.dimension])?;
                let field = sample_field(&p.spec, seed, c.to_box())?;
                let r = mu(&field, &c, &p.q, p.h)?;
                let mut row = vec![r.value];
                row.extend(r.slope);
                Ok(row)
            }
            Job::Patching(p) => {
                let d = p.spec.dimension;
                let region = triadic_cube(d, 2 * p.request.n, &vec![0.0; d]).to_box();
                let field = sample_field(&p.spec, seed, region)?;
                let r = patch_candidate(&field, &p.request)?.0;
                Ok(vec![r.candidate_energy, r.nu, r.mu_n, r.gap, r.admissibility, r.helmholtz_residual])
            }
        }
    }
}
