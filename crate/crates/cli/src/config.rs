//! Per-command JSON configuration.
//!
//! Every command reads one JSON object. The Lagrangian is given inline as
//! `spec` or by reference as `spec_file` (relative to the config file).
//! Unknown keys are rejected so typos surface as validation errors.

use std::fs;
use std::path::{Path, PathBuf};

use homog_core::cell::CellKind;
use homog_core::effective::{EstimateRequest, Lattice, DEFAULT_MAX_NODES};
use homog_core::field::LagrangianSpec;
use homog_core::homogenize::BoundaryDatum;
use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::Failure;

fn default_max_nodes() -> usize {
    DEFAULT_MAX_NODES
}

fn default_side() -> u32 {
    1
}

fn default_slope() -> Vec<f64> {
    vec![1.0, 0.0]
}

fn default_constant() -> f64 {
    3.0
}

fn default_delta() -> f64 {
    1.0 / 14.0
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub radius: f64,
    pub spacing: f64,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EffectiveConfig {
    pub spec: Option<LagrangianSpec>,
    pub spec_file: Option<PathBuf>,
    pub p_grid: Option<GridConfig>,
    pub q_grid: Option<GridConfig>,
    pub scales: Vec<u32>,
    pub samples: usize,
    pub h: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_nodes")]
    pub max_nodes: usize,
    pub out: Option<PathBuf>,
}

/// The effective-model stage of a Dirichlet run.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EffectiveStage {
    pub p_grid: Option<GridConfig>,
    pub q_grid: Option<GridConfig>,
    pub scales: Vec<u32>,
    pub samples: usize,
    /// Defaults to the experiment's `h`.
    pub h: Option<f64>,
    /// Defaults to the experiment's seed.
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirichletConfig {
    pub spec: Option<LagrangianSpec>,
    pub spec_file: Option<PathBuf>,
    #[serde(default = "default_side")]
    pub side: u32,
    pub datum: BoundaryDatum,
    pub scales: Vec<u32>,
    pub samples: usize,
    pub h: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_nodes")]
    pub max_nodes: usize,
    pub effective: EffectiveStage,
    pub out: Option<PathBuf>,
}

/// Improvement-of-flatness check on a constant-coefficient quadratic minimizer.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImprovementConfig {
    pub a: Vec<Vec<f64>>,
    pub big_r: f64,
    pub r: f64,
    pub theta: f64,
    #[serde(default = "default_slope")]
    pub slope: Vec<f64>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularityConfig {
    pub spec: Option<LagrangianSpec>,
    pub spec_file: Option<PathBuf>,
    pub radii: Vec<f64>,
    pub samples: usize,
    pub h: f64,
    #[serde(default = "default_slope")]
    pub slope: Vec<f64>,
    #[serde(default = "default_constant")]
    pub constant: f64,
    #[serde(default)]
    pub thresholds: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    pub improvement: Option<ImprovementConfig>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VarianceConfig {
    pub spec: Option<LagrangianSpec>,
    pub spec_file: Option<PathBuf>,
    pub q: Vec<f64>,
    pub scales: Vec<u32>,
    pub samples: usize,
    pub h: f64,
    #[serde(default)]
    pub seed: u64,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchingConfig {
    pub spec: Option<LagrangianSpec>,
    pub spec_file: Option<PathBuf>,
    pub scales: Vec<u32>,
    pub q: Vec<f64>,
    /// Fixed `P̄`; estimated per scale when absent.
    pub pbar: Option<Vec<f64>>,
    /// Members used to estimate `P̄_n` (at least 10).
    pub pbar_samples: Option<usize>,
    pub h: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellConfig {
    pub spec: Option<LagrangianSpec>,
    pub spec_file: Option<PathBuf>,
    pub kind: CellKind,
    pub n: u32,
    pub vector: Vec<f64>,
    pub h: f64,
    #[serde(default)]
    pub trimmed: bool,
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
    pub out: Option<PathBuf>,
}

/// Parse `text` as `T`, reporting `path:line:column` on failure.
pub fn parse<T: DeserializeOwned>(text: &str, path: &Path) -> Result<T, Failure> {
    serde_json::from_str(text).map_err(|e| {
        Failure::Validation(format!("{}:{}:{}: {}", path.display(), e.line(), e.column(), strip_position(&e)))
    })
}

fn strip_position(e: &serde_json::Error) -> String {
    let s = e.to_string();
    match s.rfind(" at line ") {
        Some(i) => s[..i].to_string(),
        None => s,
    }
}

/// Resolve `spec` / `spec_file` relative to the directory of the config.
pub fn resolve_spec(spec: &Option<LagrangianSpec>, file: &Option<PathBuf>, config: &Path) -> Result<LagrangianSpec, Failure> {
    let s = match (spec, file) {
        (Some(s), None) => s.clone(),
        (None, Some(f)) => {
            let path = config.parent().unwrap_or(Path::new(".")).join(f);
            let text = fs::read_to_string(&path)
                .map_err(|e| Failure::Validation(format!("cannot read spec file {}: {e}", path.display())))?;
            parse(&text, &path)?
        }
        (Some(_), Some(_)) => return Err(Failure::Validation("give either `spec` or `spec_file`, not both".into())),
        (None, None) => return Err(Failure::Validation("missing `spec` or `spec_file`".into())),
    };
    s.validate()?;
    Ok(s)
}

pub fn lattice(d: usize, g: Option<GridConfig>) -> Result<Lattice, Failure> {
    match g {
        Some(g) => Ok(Lattice::new(d, g.radius, g.spacing)?),
        None => Ok(Lattice::standard(d)),
    }
}

impl EffectiveConfig {
    pub fn request(&self, config: &Path, seed: u64) -> Result<EstimateRequest, Failure> {
        let spec = resolve_spec(&self.spec, &self.spec_file, config)?;
        let d = spec.dimension;
        Ok(EstimateRequest {
            p_grid: lattice(d, self.p_grid)?,
            q_grid: lattice(d, self.q_grid)?,
            spec,
            scales: self.scales.clone(),
            samples: self.samples,
            h: self.h,
            seed,
            max_nodes: self.max_nodes,
        })
    }
}
