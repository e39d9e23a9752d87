//! Random Lagrangians that are piecewise constant on unit cells.
//!
//! Cell assignment is a pure function of `(seed, z)` computed with the
//! splitmix64 finalizer, so realizations are reproducible on any platform
//! and under any evaluation order:
//!
//! ```text
//! mix64(z):
//!     z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9   (wrapping)
//!     z = (z ^ (z >> 27)) * 0x94D049BB133111EB   (wrapping)
//!     return z ^ (z >> 31)
//!
//! cell_hash(seed, stream, z[0..d]):
//!     h = mix64(seed + GOLDEN * (stream + 1))
//!     for axis k: h = mix64(h ^ (z[k] as u64 + GOLDEN * (k + 1)))
//!     return h
//!
//! uniform = (h >> 11) * 2^-53
//! ```
//!
//! with `GOLDEN = 0x9E3779B97F4A7C15`. Stream 0 selects the phase, stream 1
//! the perturbation mark, stream 2 the laminate offset.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoxDomain;

pub const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

const STREAM_PHASE: u64 = 0;
const STREAM_MARK: u64 = 1;
const STREAM_OFFSET: u64 = 2;

pub type Mat3 = [[f64; 3]; 3];

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash of a seed, a stream tag and an integer cell coordinate.
pub fn cell_hash(seed: u64, stream: u64, z: &[i64]) -> u64 {
    let mut h = mix64(seed.wrapping_add(GOLDEN.wrapping_mul(stream + 1)));
    for (k, &c) in z.iter().enumerate() {
        h = mix64(h ^ (c as u64).wrapping_add(GOLDEN.wrapping_mul(k as u64 + 1)));
    }
    h
}

/// Seed of member `index` derived from `base`.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    mix64(mix64(base) ^ index.wrapping_add(1).wrapping_mul(GOLDEN))
}

#[inline]
pub fn unit_uniform(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Quadratic,
    QuadraticPlusPerturbation,
}

/// Spatial arrangement of phases.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Layout {
    /// Independent cells drawn from `probs`.
    #[default]
    Iid,
    /// Phases cycle along `axis`; with `random_offset` the cycle start is drawn per seed.
    Laminate {
        axis: usize,
        #[serde(default)]
        random_offset: bool,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagrangianSpec {
    pub dimension: usize,
    pub family: Family,
    /// Row-major phase matrices, each given as a list of rows.
    pub phases: Vec<Vec<Vec<f64>>>,
    pub probs: Vec<f64>,
    #[serde(default)]
    pub kappa: f64,
    pub lambda: f64,
    #[serde(default)]
    pub layout: Layout,
}

impl LagrangianSpec {
    /// Two-phase isotropic spec `{a·I, b·I}` with equal probabilities.
    pub fn two_phase(dimension: usize, a: f64, b: f64, lambda: f64) -> Self {
        LagrangianSpec {
            dimension,
            family: Family::Quadratic,
            phases: vec![scaled_identity(dimension, a), scaled_identity(dimension, b)],
            probs: vec![0.5, 0.5],
            kappa: 0.0,
            lambda,
            layout: Layout::Iid,
        }
    }

    /// Single-phase spec with constant matrix `a` (rows).
    pub fn constant(a: Vec<Vec<f64>>, lambda: f64) -> Self {
        LagrangianSpec {
            dimension: a.len(),
            family: Family::Quadratic,
            phases: vec![a],
            probs: vec![1.0],
            kappa: 0.0,
            lambda,
            layout: Layout::Iid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dimension;
        if d != 2 && d != 3 {
            return Err(Error::Validation(format!("dimension must be 2 or 3, got {d}")));
        }
        if !(self.lambda >= 1.0) || !self.lambda.is_finite() {
            return Err(Error::Validation(format!("lambda must be >= 1, got {}", self.lambda)));
        }
        if self.phases.is_empty() {
            return Err(Error::Validation("at least one phase is required".into()));
        }
        if self.probs.len() != self.phases.len() {
            return Err(Error::Validation(format!(
                "{} probabilities for {} phases",
                self.probs.len(),
                self.phases.len()
            )));
        }
        if self.probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::Validation("probabilities must be nonnegative".into()));
        }
        let total: f64 = self.probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!("probabilities sum to {total}, not 1")));
        }
        match self.family {
            Family::Quadratic if self.kappa != 0.0 => {
                return Err(Error::Validation("kappa must be 0 for the quadratic family".into()))
            }
            Family::QuadraticPlusPerturbation if !(0.0..=0.5).contains(&self.kappa) => {
                return Err(Error::Validation(format!("kappa must lie in [0, 1/2], got {}", self.kappa)))
            }
            _ => {}
        }
        if let Layout::Laminate { axis, .. } = self.layout {
            if axis >= d {
                return Err(Error::Validation(format!("laminate axis {axis} out of range")));
            }
        }
        for (k, a) in self.phases.iter().enumerate() {
            if a.len() != d || a.iter().any(|row| row.len() != d) {
                return Err(Error::Validation(format!("phase {k} is not a {d}x{d} matrix")));
            }
            for i in 0..d {
                for j in 0..d {
                    if !a[i][j].is_finite() || (a[i][j] - a[j][i]).abs() > 1e-12 * (1.0 + a[i][j].abs()) {
                        return Err(Error::Validation(format!("phase {k} is not symmetric")));
                    }
                }
            }
            let (lo, hi) = eigen_range(a);
            let tol = 1e-12 * self.lambda;
            if lo < 1.0 - tol || hi > self.lambda + tol {
                return Err(Error::Validation(format!(
                    "phase {k}: matrix eigenvalue outside [1, {}] (eigenvalues in [{lo}, {hi}])",
                    self.lambda
                )));
            }
            if self.family == Family::QuadraticPlusPerturbation && hi + 0.5 * self.kappa > self.lambda + tol {
                return Err(Error::Validation(format!(
                    "phase {k}: largest eigenvalue {hi} plus kappa/2 exceeds lambda {}",
                    self.lambda
                )));
            }
        }
        Ok(())
    }

    /// Smallest growth constant (at least 1) for which
    /// `|p|² − K₀(1+|p|) ≤ L(p,x) ≤ Λ|p|² + K₀(1+|p|)` holds for all phases and marks.
    pub fn growth_constant(&self) -> f64 {
        let kappa = match self.family {
            Family::Quadratic => 0.0,
            Family::QuadraticPlusPerturbation => self.kappa,
        };
        let mut k0: f64 = 1.0;
        for a in &self.phases {
            let (lo, hi) = eigen_range(a);
            let upper = |r: f64| ((hi - self.lambda) * r * r + kappa * ((1.0 + r * r).sqrt() - 1.0)) / (1.0 + r);
            let lower = |r: f64| ((1.0 - lo) * r * r) / (1.0 + r);
            k0 = k0.max(sup_on_halfline(upper)).max(sup_on_halfline(lower));
        }
        k0
    }

    pub fn materials(&self) -> Vec<Material> {
        let mut out = Vec::new();
        for a in &self.phases {
            let m = to_mat3(a);
            out.push(Material::quadratic(m));
            if self.family == Family::QuadraticPlusPerturbation {
                out.push(Material { a: m, kappa: self.kappa, offset: 0.0 });
            }
        }
        out
    }
}

pub fn scaled_identity(d: usize, s: f64) -> Vec<Vec<f64>> {
    (0..d).map(|i| (0..d).map(|j| if i == j { s } else { 0.0 }).collect()).collect()
}

pub fn to_mat3(a: &[Vec<f64>]) -> Mat3 {
    let mut m = [[0.0; 3]; 3];
    for (i, row) in a.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            m[i][j] = v;
        }
    }
    m
}

fn eigen_range(a: &[Vec<f64>]) -> (f64, f64) {
    let d = a.len();
    let m = DMatrix::from_fn(d, d, |i, j| a[i][j]);
    let eig = m.symmetric_eigen().eigenvalues;
    let lo = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// Maximum of `f` over r ≥ 0 by dense sampling on a log grid plus golden refinement.
fn sup_on_halfline(f: impl Fn(f64) -> f64) -> f64 {
    let mut best_r = 0.0;
    let mut best = f(0.0);
    let mut r = 1e-4;
    while r < 1e4 {
        let v = f(r);
        if v > best {
            best = v;
            best_r = r;
        }
        r *= 1.05;
    }
    let (mut a, mut b) = (best_r / 1.05, best_r * 1.05);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..80 {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if f(c) > f(d) {
            b = d;
        } else {
            a = c;
        }
    }
    best.max(f(0.5 * (a + b)))
}

/// Local integrand `L(p) = p·A p + κ(√(1+|p|²) − 1) + offset`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Material {
    pub a: Mat3,
    pub kappa: f64,
    pub offset: f64,
}

impl Material {
    pub fn quadratic(a: Mat3) -> Self {
        Material { a, kappa: 0.0, offset: 0.0 }
    }

    pub fn is_quadratic(&self) -> bool {
        self.kappa == 0.0
    }

    #[inline]
    pub fn value(&self, d: usize, p: &[f64]) -> f64 {
        let mut v = self.offset;
        let mut p2 = 0.0;
        for i in 0..d {
            let mut ap = 0.0;
            for j in 0..d {
                ap += self.a[i][j] * p[j];
            }
            v += p[i] * ap;
            p2 += p[i] * p[i];
        }
        if self.kappa != 0.0 {
            // sqrt(1+s) - 1 written to avoid cancellation for small s
            v += self.kappa * p2 / ((1.0 + p2).sqrt() + 1.0);
        }
        v
    }

    #[inline]
    pub fn gradient(&self, d: usize, p: &[f64], out: &mut [f64]) {
        let p2: f64 = p[..d].iter().map(|x| x * x).sum();
        let s = if self.kappa != 0.0 { self.kappa / (1.0 + p2).sqrt() } else { 0.0 };
        for i in 0..d {
            let mut g = 0.0;
            for j in 0..d {
                g += 2.0 * self.a[i][j] * p[j];
            }
            out[i] = g + s * p[i];
        }
    }

    /// Hessian in p, row-major into `out[..d*d]`.
    #[inline]
    pub fn hessian(&self, d: usize, p: &[f64], out: &mut [f64]) {
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] = 2.0 * self.a[i][j];
            }
        }
        if self.kappa != 0.0 {
            let p2: f64 = p[..d].iter().map(|x| x * x).sum();
            let s = (1.0 + p2).sqrt();
            for i in 0..d {
                for j in 0..d {
                    let delta = if i == j { 1.0 } else { 0.0 };
                    out[i * d + j] += self.kappa * (delta / s - p[i] * p[j] / (s * s * s));
                }
            }
        }
    }
}

/// A coefficient field on unit cells: a material table plus a cell-to-material map.
pub trait Medium: Sync {
    fn dim(&self) -> usize;
    fn materials(&self) -> &[Material];
    /// Material of the unit cell `z + [0,1)^d`.
    fn material_index(&self, z: &[i64; 3]) -> usize;
    fn growth_constant(&self) -> f64;
    fn region(&self) -> Option<&BoxDomain> {
        None
    }
}

/// Spatially constant medium.
#[derive(Clone, Debug)]
pub struct HomogeneousMedium {
    dim: usize,
    material: [Material; 1],
    k0: f64,
}

impl HomogeneousMedium {
    pub fn new(dim: usize, material: Material, k0: f64) -> Self {
        HomogeneousMedium { dim, material: [material], k0 }
    }
}

impl Medium for HomogeneousMedium {
    fn dim(&self) -> usize {
        self.dim
    }
    fn materials(&self) -> &[Material] {
        &self.material
    }
    fn material_index(&self, _z: &[i64; 3]) -> usize {
        0
    }
    fn growth_constant(&self) -> f64 {
        self.k0
    }
}

/// One sampled realization of a [`LagrangianSpec`] restricted to a box.
#[derive(Clone, Debug)]
pub struct FieldRealization {
    pub spec: LagrangianSpec,
    pub seed: u64,
    pub region: BoxDomain,
    materials: Vec<Material>,
    k0: f64,
    laminate_offset: i64,
}

pub fn sample_field(spec: &LagrangianSpec, seed: u64, region: BoxDomain) -> Result<FieldRealization> {
    spec.validate()?;
    if region.dim() != spec.dimension {
        return Err(Error::Validation(format!(
            "region dimension {} does not match spec dimension {}",
            region.dim(),
            spec.dimension
        )));
    }
    let laminate_offset = match spec.layout {
        Layout::Laminate { random_offset: true, .. } => {
            (cell_hash(seed, STREAM_OFFSET, &[]) % spec.phases.len() as u64) as i64
        }
        _ => 0,
    };
    Ok(FieldRealization {
        materials: spec.materials(),
        k0: spec.growth_constant(),
        spec: spec.clone(),
        seed,
        region,
        laminate_offset,
    })
}

impl FieldRealization {
    pub fn phase_index(&self, z: &[i64; 3]) -> usize {
        let d = self.spec.dimension;
        match self.spec.layout {
            Layout::Iid => {
                let u = unit_uniform(cell_hash(self.seed, STREAM_PHASE, &z[..d]));
                let mut acc = 0.0;
                let last = self.spec.probs.len() - 1;
                for (k, &p) in self.spec.probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return k;
                    }
                }
                last
            }
            Layout::Laminate { axis, .. } => {
                (z[axis] + self.laminate_offset).rem_euclid(self.spec.phases.len() as i64) as usize
            }
        }
    }

    /// Perturbation mark `c(x) ∈ {0, 1}` of a cell; always 0 in the quadratic family.
    pub fn mark(&self, z: &[i64; 3]) -> bool {
        match self.spec.family {
            Family::Quadratic => false,
            Family::QuadraticPlusPerturbation => {
                cell_hash(self.seed, STREAM_MARK, &z[..self.spec.dimension]) >> 63 == 1
            }
        }
    }

    pub fn lambda(&self) -> f64 {
        self.spec.lambda
    }

    fn material_at(&self, x: &[f64]) -> Result<&Material> {
        let d = self.spec.dimension;
        if x.len() != d {
            return Err(Error::Domain(format!("point has {} coordinates, expected {d}", x.len())));
        }
        if !self.region.contains_point(x) {
            return Err(Error::Domain(format!("point {x:?} outside the field region")));
        }
        let mut z = [0i64; 3];
        for k in 0..d {
            z[k] = x[k].floor() as i64;
        }
        Ok(&self.materials[self.material_index(&z)])
    }

    pub fn evaluate_l(&self, p: &[f64], x: &[f64]) -> Result<f64> {
        let d = self.spec.dimension;
        check_len(p, d)?;
        Ok(self.material_at(x)?.value(d, p))
    }

    pub fn evaluate_dpl(&self, p: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        let d = self.spec.dimension;
        check_len(p, d)?;
        let mut g = vec![0.0; d];
        self.material_at(x)?.gradient(d, p, &mut g);
        Ok(g)
    }

    pub fn evaluate_hessian(&self, p: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        let d = self.spec.dimension;
        check_len(p, d)?;
        let mut h = vec![0.0; d * d];
        self.material_at(x)?.hessian(d, p, &mut h);
        Ok(h)
    }
}

fn check_len(p: &[f64], d: usize) -> Result<()> {
    if p.len() != d {
        return Err(Error::Domain(format!("slope has {} components, expected {d}", p.len())));
    }
    Ok(())
}

impl Medium for FieldRealization {
    fn dim(&self) -> usize {
        self.spec.dimension
    }
    fn materials(&self) -> &[Material] {
        &self.materials
    }
    fn material_index(&self, z: &[i64; 3]) -> usize {
        let k = self.phase_index(z);
        match self.spec.family {
            Family::Quadratic => k,
            Family::QuadraticPlusPerturbation => 2 * k + self.mark(z) as usize,
        }
    }
    fn growth_constant(&self) -> f64 {
        self.k0
    }
    fn region(&self) -> Option<&BoxDomain> {
        Some(&self.region)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn region(d: usize) -> BoxDomain {
        BoxDomain::centered(d, 100.0)
    }

    #[test]
    fn mix64_reference_values() {
        // splitmix64 of state 0 after one increment of GOLDEN
        assert_eq!(mix64(GOLDEN), 0xE220_A839_7B1D_CDAF);
    }

    #[test]
    fn single_phase_everywhere() {
        let spec = LagrangianSpec::constant(scaled_identity(2, 1.0), 1.0);
        let f = sample_field(&spec, 42, region(2)).unwrap();
        for x in -5..5 {
            for y in -5..5 {
                assert_eq!(f.phase_index(&[x, y, 0]), 0);
            }
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let spec = LagrangianSpec::two_phase(2, 1.0, 4.0, 4.0);
        let a = sample_field(&spec, 7, region(2)).unwrap();
        let b = sample_field(&spec, 7, region(2)).unwrap();
        let c = sample_field(&spec, 8, region(2)).unwrap();
        let mut differs = false;
        for x in -10..10 {
            for y in -10..10 {
                let z = [x, y, 0];
                assert_eq!(a.phase_index(&z), b.phase_index(&z));
                differs |= a.phase_index(&z) != c.phase_index(&z);
            }
        }
        assert!(differs);
    }

    #[test]
    fn evaluate_examples() {
        let f = sample_field(&LagrangianSpec::constant(scaled_identity(2, 1.0), 1.0), 0, region(2)).unwrap();
        assert_eq!(f.evaluate_l(&[1.0, 0.0], &[0.3, 0.3]).unwrap(), 1.0);
        assert_eq!(f.evaluate_dpl(&[3.0, 0.0], &[0.3, 0.3]).unwrap(), vec![6.0, 0.0]);
        let f = sample_field(&LagrangianSpec::constant(scaled_identity(2, 2.0), 2.0), 0, region(2)).unwrap();
        assert_eq!(f.evaluate_l(&[1.0, 1.0], &[0.3, 0.3]).unwrap(), 4.0);
        let f = sample_field(
            &LagrangianSpec::constant(vec![vec![1.0, 0.0], vec![0.0, 4.0]], 4.0),
            0,
            region(2),
        )
        .unwrap();
        assert_eq!(f.evaluate_dpl(&[1.0, 1.0], &[0.3, 0.3]).unwrap(), vec![2.0, 8.0]);
    }

    #[test]
    fn outside_region_is_domain_error() {
        let f = sample_field(&LagrangianSpec::two_phase(2, 1.0, 4.0, 4.0), 0, BoxDomain::centered(2, 1.5)).unwrap();
        assert!(matches!(f.evaluate_l(&[1.0, 0.0], &[2.0, 0.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn invalid_phase_rejected() {
        let spec = LagrangianSpec::two_phase(2, 0.5, 2.0, 4.0);
        assert!(matches!(spec.validate(), Err(Error::Validation(_))));
        let spec = LagrangianSpec::two_phase(2, 1.0, 5.0, 4.0);
        assert!(matches!(spec.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn growth_constant_is_one_for_valid_specs() {
        let mut spec = LagrangianSpec::two_phase(2, 1.0, 3.5, 4.0);
        spec.family = Family::QuadraticPlusPerturbation;
        spec.kappa = 0.5;
        spec.validate().unwrap();
        assert_eq!(spec.growth_constant(), 1.0);
    }

    #[test]
    fn laminate_alternates() {
        let mut spec = LagrangianSpec::two_phase(2, 1.0, 4.0, 4.0);
        spec.layout = Layout::Laminate { axis: 0, random_offset: false };
        let f = sample_field(&spec, 3, region(2)).unwrap();
        for x in -4..4i64 {
            for y in -3..3 {
                assert_eq!(f.phase_index(&[x, y, 0]), x.rem_euclid(2) as usize);
            }
        }
    }
}
