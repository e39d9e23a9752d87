//! Oscillation and flatness diagnostics for local minimizers.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{sample_field, LagrangianSpec, Medium};
use crate::geometry::{BoxDomain, Grid};
use crate::harness::{run_members, tail_diagnostic, Exceedance, Summary};
use crate::solver::{default_tol, gauss_gradients, minimize, Boundary, DiscreteEnergy, GridFunction, Role};

/// Oscillation data of one function around one center.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OscillationProfile {
    pub center: Vec<f64>,
    pub radii: Vec<f64>,
    /// Grid nodes in each ball.
    pub nodes: Vec<usize>,
    pub osc: Vec<f64>,
    /// `osc / r`.
    pub normalized: Vec<f64>,
    /// `inf_p osc(u − p·x) / r`.
    pub flatness: Vec<f64>,
    pub p_star: Vec<Vec<f64>>,
    /// `⨏ |Du|²` over the fine cells whose centers lie in the ball.
    pub energy: Vec<f64>,
}

impl OscillationProfile {
    /// Smallest tested radius from which on `osc/r ≤ bound` holds at every larger tested radius.
    pub fn y_surrogate(&self, bound: f64) -> Option<f64> {
        let mut y = None;
        for (r, v) in self.radii.iter().zip(&self.normalized).rev() {
            if *v > bound {
                break;
            }
            y = Some(*r);
        }
        y
    }
}

struct Ball {
    x: Vec<[f64; 3]>,
    u: Vec<f64>,
}

fn ball(u: &GridFunction, center: &[f64], r: f64) -> Result<Ball> {
    let grid = u.grid;
    let d = grid.dim();
    if center.len() != d {
        return Err(Error::Validation(format!("center has {} coordinates, expected {d}", center.len())));
    }
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::Validation(format!("radius must be positive, got {r}")));
    }
    for k in 0..d {
        if center[k] - r < grid.domain.lo(k) || center[k] + r > grid.domain.hi(k) {
            return Err(Error::Geometry(format!("ball of radius {r} around {center:?} leaves the grid")));
        }
    }
    let mut b = Ball { x: Vec::new(), u: Vec::new() };
    for i in 0..grid.n_nodes() {
        let x = grid.node_coord(i);
        let dist2: f64 = (0..d).map(|k| (x[k] - center[k]).powi(2)).sum();
        if dist2 <= r * r * (1.0 + 1e-12) {
            let mut rel = [0.0; 3];
            for k in 0..d {
                rel[k] = x[k] - center[k];
            }
            b.x.push(rel);
            b.u.push(u.values[i]);
        }
    }
    Ok(b)
}

fn osc_tilted(b: &Ball, p: &[f64]) -> f64 {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (x, u) in b.x.iter().zip(&b.u) {
        let v = u - p.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
        lo = lo.min(v);
        hi = hi.max(v);
    }
    hi - lo
}

/// Least-squares plane `u ≈ a + p·x` through the normal equations; returns `p`.
fn plane_fit(b: &Ball, d: usize) -> Vec<f64> {
    let mut ata = DMatrix::<f64>::zeros(d + 1, d + 1);
    let mut atb = DVector::<f64>::zeros(d + 1);
    let mut row = [1.0; 4];
    for (x, u) in b.x.iter().zip(&b.u) {
        row[1..=d].copy_from_slice(&x[..d]);
        for i in 0..=d {
            atb[i] += row[i] * u;
            for j in 0..=d {
                ata[(i, j)] += row[i] * row[j];
            }
        }
    }
    match ata.lu().solve(&atb) {
        Some(sol) => (1..=d).map(|j| sol[j]).collect(),
        None => vec![0.0; d],
    }
}

fn golden(lo: f64, hi: f64, tol: f64, mut f: impl FnMut(f64) -> f64) -> (f64, f64) {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - g * (b - a);
    let mut e = a + g * (b - a);
    let mut fc = f(c);
    let mut fe = f(e);
    for _ in 0..200 {
        if b - a <= tol {
            break;
        }
        if fc <= fe {
            b = e;
            e = c;
            fe = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = e;
            fc = fe;
            e = a + g * (b - a);
            fe = f(e);
        }
    }
    if fc <= fe {
        (c, fc)
    } else {
        (e, fe)
    }
}

/// `min_p osc(u − p·x)` over `p ∈ center ± width` by nested golden-section
/// searches, one coordinate per level; exact for convex objectives since
/// partial minima of a convex function are convex.
fn min_osc(b: &Ball, center: &[f64], width: f64, tol: f64) -> (f64, Vec<f64>) {
    fn level(b: &Ball, center: &[f64], width: f64, tol: f64, p: &mut Vec<f64>, k: usize) -> f64 {
        if k == center.len() {
            return osc_tilted(b, p);
        }
        let (best, _) = golden(center[k] - width, center[k] + width, tol, |t| {
            p[k] = t;
            level(b, center, width, tol, p, k + 1)
        });
        p[k] = best;
        level(b, center, width, tol, p, k + 1)
    }
    let mut p = center.to_vec();
    let v = level(b, center, width, tol, &mut p, 0);
    let at_center = osc_tilted(b, center);
    if at_center <= v {
        (at_center, center.to_vec())
    } else {
        (v, p)
    }
}

/// `inf_p osc_{B_r}(u − p·x) / r` and a minimizing `p`.
fn flatness_of(b: &Ball, d: usize, r: f64) -> (f64, Vec<f64>) {
    if b.x.len() <= d {
        return (0.0, vec![0.0; d]);
    }
    let p_ls = plane_fit(b, d);
    let osc_ls = osc_tilted(b, &p_ls);
    // any p farther than osc_ls/extent from p_ls tilts the data by more than osc_ls
    let extent = (0..d)
        .map(|k| b.x.iter().fold(0.0f64, |m, x| m.max(x[k].abs())))
        .fold(f64::INFINITY, f64::min);
    if osc_ls == 0.0 || extent == 0.0 {
        return (0.0, p_ls);
    }
    let width = 1.01 * osc_ls / extent + 1e-300;
    let scale = 1.0 + p_ls.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let (v, p) = min_osc(b, &p_ls, width, (1e-10 * width).max(1e-14 * scale));
    (v / r, p)
}

fn ball_energy(u: &GridFunction, center: &[f64], r: f64) -> f64 {
    let grid = u.grid;
    let d = grid.dim();
    let h = grid.h();
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..grid.n_cells() {
        let cm = grid.cell_multi(c);
        let base = grid.node_coord_multi(cm);
        let dist2: f64 = (0..d).map(|k| (base[k] + 0.5 * h - center[k]).powi(2)).sum();
        if dist2 > r * r {
            continue;
        }
        let g = gauss_gradients(&grid, &u.values, cm);
        total += g.iter().map(|du| du[..d].iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / g.len() as f64;
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

pub fn oscillation_profile(u: &GridFunction, center: &[f64], radii: &[f64]) -> Result<OscillationProfile> {
    let d = u.grid.dim();
    if radii.is_empty() {
        return Err(Error::Validation("radius list is empty".into()));
    }
    if radii.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Validation("radii must be strictly increasing".into()));
    }
    let mut prof = OscillationProfile {
        center: center.to_vec(),
        radii: radii.to_vec(),
        nodes: vec![],
        osc: vec![],
        normalized: vec![],
        flatness: vec![],
        p_star: vec![],
        energy: vec![],
    };
    for &r in radii {
        let b = ball(u, center, r)?;
        if b.x.is_empty() {
            return Err(Error::Geometry(format!("ball of radius {r} contains no grid nodes")));
        }
        let osc = osc_tilted(&b, &vec![0.0; d]);
        let (flat, p) = flatness_of(&b, d, r);
        // p = 0 is admissible in the infimum
        let flat = flat.min(osc / r);
        prof.nodes.push(b.x.len());
        prof.osc.push(osc);
        prof.normalized.push(osc / r);
        prof.flatness.push(flat);
        prof.p_star.push(p);
        prof.energy.push(ball_energy(u, center, r));
    }
    Ok(prof)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FlatnessImprovement {
    pub holds: bool,
    /// `flatness(θr) / flatness(r)`; 0 when both vanish.
    pub ratio: f64,
    pub flat_r: f64,
    pub flat_theta_r: f64,
}

/// Whether `flatness(θr) ≤ ½ flatness(r)` around `center`.
///
/// A function flat to rounding at radius `r` (flatness below `10⁻⁹` times
/// `max(1, osc/r)`) counts as 0/0 and passes with ratio 0.
pub fn improvement_of_flatness_check(v: &GridFunction, center: &[f64], r: f64, theta: f64) -> Result<FlatnessImprovement> {
    if !(theta > 0.0 && theta <= 0.5) {
        return Err(Error::Validation(format!("θ must lie in (0, ½], got {theta}")));
    }
    let prof = oscillation_profile(v, center, &[theta * r, r])?;
    let (flat_theta_r, flat_r) = (prof.flatness[0], prof.flatness[1]);
    if flat_r <= 1e-9 * prof.normalized[1].max(1.0) {
        return Ok(FlatnessImprovement { holds: true, ratio: 0.0, flat_r, flat_theta_r });
    }
    let ratio = flat_theta_r / flat_r;
    Ok(FlatnessImprovement { holds: ratio <= 0.5, ratio, flat_r, flat_theta_r })
}

/// Minimizer on the cube `(−R, R)^d` with data `g(x) = p·x + 0.1|x|²/R`.
pub fn local_minimizer(medium: &dyn Medium, big_r: f64, p: &[f64], h: f64) -> Result<GridFunction> {
    let d = medium.dim();
    if p.len() != d {
        return Err(Error::Validation(format!("slope has {} components, expected {d}", p.len())));
    }
    let grid = Grid::new(BoxDomain::centered(d, big_r), h)?;
    let g = GridFunction::from_fn(grid, Role::G, |x| {
        (0..d).map(|k| p[k] * x[k] + 0.1 * x[k] * x[k] / big_r).sum()
    });
    let e = DiscreteEnergy::new(medium, grid, vec![0.0; d], Boundary::Dirichlet(g));
    Ok(minimize(&e, default_tol(medium))?.solution)
}

/// Tested radii: powers of two from 1 up to `R/2`, plus `R/2` itself.
pub fn dyadic_radii(big_r: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut r = 1.0;
    while r < big_r / 2.0 {
        out.push(r);
        r *= 2.0;
    }
    out.push(big_r / 2.0);
    out
}

fn default_slope() -> Vec<f64> {
    vec![1.0, 0.0]
}

fn default_constant() -> f64 {
    3.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QuenchedRequest {
    pub spec: LagrangianSpec,
    /// Outer radii `R`; each must be a multiple of ½.
    pub radii: Vec<f64>,
    pub samples: usize,
    pub h: f64,
    #[serde(default = "default_slope")]
    pub slope: Vec<f64>,
    /// Calibrated `C` in the admissibility test `osc/r ≤ C·M`.
    #[serde(default = "default_constant")]
    pub constant: f64,
    /// Thresholds `y` for the tail `P[Y > y]`.
    #[serde(default)]
    pub thresholds: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QuenchedRow {
    pub seed: u64,
    pub big_r: f64,
    /// Y surrogate; `R` when no tested radius qualifies.
    pub y: f64,
    /// `max osc/r` over tested radii in `[2, R/2]`.
    pub max_normalized: f64,
    pub profile: OscillationProfile,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QuenchedScale {
    pub big_r: f64,
    pub y: Summary,
    pub median_y: f64,
    pub max_normalized: Summary,
    pub tail: Vec<Exceedance>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QuenchedReport {
    /// `M = |p| + 0.2 ≥ sup_{B_R} |Dg|`.
    pub data_bound: f64,
    pub rows: Vec<QuenchedRow>,
    pub scales: Vec<QuenchedScale>,
    pub failed: usize,
}

impl QuenchedReport {
    /// `seed,R,r,osc,flatness,p_star0,…`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let d = self.rows.first().map_or(0, |r| r.profile.center.len());
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = ["seed", "R", "r", "osc", "flatness"].iter().map(|s| s.to_string()).collect();
        header.extend((0..d).map(|k| format!("p_star{k}")));
        w.write_record(&header)?;
        for row in &self.rows {
            let p = &row.profile;
            for i in 0..p.radii.len() {
                let mut rec =
                    vec![row.seed.to_string(), row.big_r.to_string(), p.radii[i].to_string(), p.osc[i].to_string(), p.flatness[i].to_string()];
                rec.extend(p.p_star[i].iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut s = xs.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Y surrogate and `max osc/r` of one realization's local minimizer on the cube of half-width `big_r`.
pub(crate) fn quenched_member(
    spec: &LagrangianSpec,
    big_r: f64,
    slope: &[f64],
    h: f64,
    bound: f64,
    seed: u64,
) -> Result<QuenchedRow> {
    let d = spec.dimension;
    let field = sample_field(spec, seed, BoxDomain::centered(d, big_r))?;
    let u = local_minimizer(&field, big_r, slope, h)?;
    let profile = oscillation_profile(&u, &vec![0.0; d], &dyadic_radii(big_r))?;
    let y = profile.y_surrogate(bound).unwrap_or(big_r);
    let max_normalized = profile
        .radii
        .iter()
        .zip(&profile.normalized)
        .filter(|(r, _)| **r >= 2.0)
        .fold(0.0f64, |acc, (_, v)| acc.max(*v));
    Ok(QuenchedRow { seed, big_r, y, max_normalized, profile })
}

/// Y surrogates of local minimizers on `B_R` across an ensemble.
pub fn quenched_lipschitz_experiment(req: &QuenchedRequest, seed: u64) -> Result<QuenchedReport> {
    req.spec.validate()?;
    let d = req.spec.dimension;
    if req.samples < 20 {
        return Err(Error::Validation(format!("quenched experiment needs at least 20 samples, got {}", req.samples)));
    }
    if req.slope.len() != d {
        return Err(Error::Validation(format!("slope has {} components, expected {d}", req.slope.len())));
    }
    if req.radii.is_empty() || req.radii.iter().any(|r| !(*r >= 2.0) || (2.0 * r).fract() != 0.0) {
        return Err(Error::Validation("outer radii must be multiples of ½ and at least 2".into()));
    }
    if !(req.constant > 0.0) {
        return Err(Error::Validation("calibration constant must be positive".into()));
    }
    let m = req.slope.iter().map(|v| v * v).sum::<f64>().sqrt() + 0.2;
    let bound = req.constant * m;
    let n = req.samples;
    let members = run_members(req.radii.len() * n, seed, |i, s| quenched_member(&req.spec, req.radii[i / n], &req.slope, req.h, bound, s))?;
    let failed = members.iter().filter(|m| m.outcome.is_err()).count();
    let rows: Vec<QuenchedRow> = members.into_iter().filter_map(|m| m.outcome.ok()).collect();
    let scales = req
        .radii
        .iter()
        .map(|&big_r| {
            let ys: Vec<f64> = rows.iter().filter(|r| r.big_r == big_r).map(|r| r.y).collect();
            let maxes: Vec<f64> = rows.iter().filter(|r| r.big_r == big_r).map(|r| r.max_normalized).collect();
            let thresholds = if req.thresholds.is_empty() { dyadic_radii(big_r) } else { req.thresholds.clone() };
            Ok(QuenchedScale {
                big_r,
                y: Summary::of(&ys),
                median_y: median(&ys),
                max_normalized: Summary::of(&maxes),
                tail: tail_diagnostic(&ys, &thresholds)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QuenchedReport { data_bound: m, rows, scales, failed })
}
