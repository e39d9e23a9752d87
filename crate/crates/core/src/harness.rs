//! Reproducible Monte Carlo ensembles: per-member seeds, order-independent
//! aggregation and tail diagnostics.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::derive_seed;

/// Fraction of members allowed to fail before an ensemble is void.
pub const FAILURE_QUORUM: f64 = 0.10;

/// Compensated (Kahan) accumulator.
#[derive(Clone, Copy, Debug, Default)]
pub struct KahanSum {
    sum: f64,
    c: f64,
}

impl KahanSum {
    pub fn add(&mut self, x: f64) {
        let y = x - self.c;
        let t = self.sum + y;
        self.c = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}

pub fn kahan_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut k = KahanSum::default();
    for x in xs {
        k.add(x);
    }
    k.value()
}

/// Mean, standard error, minimum and maximum of a sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    /// Sample standard deviation over √count (0 for a single sample).
    pub stderr: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Summary {
        let n = xs.len();
        if n == 0 {
            return Summary { count: 0, mean: f64::NAN, stderr: f64::NAN, min: f64::NAN, max: f64::NAN };
        }
        // summing in sorted order makes the result independent of input order
        let mut sorted = xs.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mean = kahan_sum(sorted.iter().copied()) / n as f64;
        let var = if n > 1 { kahan_sum(sorted.iter().map(|x| (x - mean).powi(2))) / (n - 1) as f64 } else { 0.0 };
        let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // rounding can push the mean of identical values a hair outside [min, max]
        Summary { count: n, mean: mean.clamp(min, max), stderr: (var / n as f64).sqrt(), min, max }
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        self.stderr * self.stderr * self.count as f64
    }
}

/// Outcome of one ensemble member.
#[derive(Clone, Debug)]
pub struct Member<T> {
    pub index: usize,
    pub seed: u64,
    pub outcome: std::result::Result<T, String>,
}

/// Run `f(index, seed)` for `n` members on the current rayon pool.
///
/// Member seeds are `derive_seed(base_seed, index)`, results come back in
/// index order, and the call fails only when more than 10% of members fail.
pub fn run_members<T, F>(n: usize, base_seed: u64, f: F) -> Result<Vec<Member<T>>>
where
    T: Send,
    F: Fn(usize, u64) -> Result<T> + Sync,
{
    let members: Vec<Member<T>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(base_seed, i as u64);
            Member { index: i, seed, outcome: f(i, seed).map_err(|e| e.to_string()) }
        })
        .collect();
    check_quorum(&members)?;
    Ok(members)
}

fn check_quorum<T>(members: &[Member<T>]) -> Result<()> {
    let failed: Vec<&Member<T>> = members.iter().filter(|m| m.outcome.is_err()).collect();
    if failed.len() as f64 > FAILURE_QUORUM * members.len() as f64 {
        let first = failed[0].outcome.as_ref().err().cloned().unwrap_or_default();
        return Err(Error::Ensemble { failed: failed.len(), total: members.len(), first });
    }
    Ok(())
}

/// Successful member results in index order.
pub fn successes<T>(members: &[Member<T>]) -> Vec<&T> {
    members.iter().filter_map(|m| m.outcome.as_ref().ok()).collect()
}

/// Run `f` on a dedicated pool with `workers` threads (0 means the global pool).
pub fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    if workers == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Validation(format!("cannot build a pool of {workers} workers: {e}")))?;
    Ok(pool.install(f))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Cell,
    Effective,
    Dirichlet,
    Regularity,
    Variance,
    Patching,
}

/// A member-level experiment: every member produces one row of named values.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnsembleTask {
    pub kind: TaskKind,
    /// Module-specific descriptor, see [`crate::tasks`].
    pub params: serde_json::Value,
    pub samples: usize,
    pub base_seed: u64,
    #[serde(default)]
    pub workers: usize,
}

/// One row per member; failed members carry the error and no values.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MemberRow {
    pub index: usize,
    pub seed: u64,
    pub values: Vec<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnsembleStats {
    pub columns: Vec<String>,
    pub rows: Vec<MemberRow>,
    /// Per-column statistics over successful members.
    pub stats: Vec<Summary>,
    pub failed: usize,
    pub elapsed_ms: f64,
}

impl EnsembleStats {
    pub fn column(&self, name: &str) -> Option<&Summary> {
        self.columns.iter().position(|c| c == name).map(|i| &self.stats[i])
    }

    /// Per-member CSV: `index,seed,<columns>,error`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["index".to_string(), "seed".to_string()];
        header.extend(self.columns.iter().cloned());
        header.push("error".into());
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.index.to_string(), r.seed.to_string()];
            if r.values.is_empty() {
                rec.extend(self.columns.iter().map(|_| String::new()));
            } else {
                rec.extend(r.values.iter().map(|v| v.to_string()));
            }
            rec.push(r.error.clone().unwrap_or_default());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Assemble statistics from per-member rows of equal width.
pub fn collect_stats(columns: Vec<String>, members: Vec<Member<Vec<f64>>>, started: Instant) -> EnsembleStats {
    let failed = members.iter().filter(|m| m.outcome.is_err()).count();
    let rows: Vec<MemberRow> = members
        .into_iter()
        .map(|m| match m.outcome {
            Ok(values) => MemberRow { index: m.index, seed: m.seed, values, error: None },
            Err(e) => MemberRow { index: m.index, seed: m.seed, values: Vec::new(), error: Some(e) },
        })
        .collect();
    let stats = (0..columns.len())
        .map(|j| {
            let xs: Vec<f64> = rows.iter().filter(|r| r.error.is_none()).map(|r| r.values[j]).collect();
            Summary::of(&xs)
        })
        .collect();
    EnsembleStats { columns, rows, stats, failed, elapsed_ms: started.elapsed().as_secs_f64() * 1e3 }
}

/// Execute a task: members run in parallel with derived seeds and are aggregated in index order.
pub fn run_ensemble(task: &EnsembleTask) -> Result<EnsembleStats> {
    if task.samples == 0 {
        return Err(Error::Validation("an ensemble needs at least one member".into()));
    }
    let job = crate::tasks::MemberJob::parse(task.kind, &task.params)?;
    let columns = job.columns();
    let started = Instant::now();
    let members = with_workers(task.workers, || run_members(task.samples, task.base_seed, |i, seed| job.run(i, seed)))??;
    Ok(collect_stats(columns, members, started))
}

/// Empirical exceedance of one threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exceedance {
    pub threshold: f64,
    pub fraction: f64,
    /// Natural log of the fraction (−∞ when no sample exceeds).
    pub log_fraction: f64,
}

/// Fraction of samples strictly above each threshold.
pub fn tail_diagnostic(samples: &[f64], thresholds: &[f64]) -> Result<Vec<Exceedance>> {
    if samples.is_empty() {
        return Err(Error::Validation("tail diagnostic needs samples".into()));
    }
    if samples.len() < 10 {
        return Err(Error::Validation(format!("tail diagnostic needs at least 10 samples, got {}", samples.len())));
    }
    let n = samples.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&t| {
            let fraction = samples.iter().filter(|&&s| s > t).count() as f64 / n;
            Exceedance { threshold: t, fraction, log_fraction: fraction.ln() }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_of_single_row() {
        let s = Summary::of(&[3.5]);
        assert_eq!((s.mean, s.stderr, s.min, s.max), (3.5, 0.0, 3.5, 3.5));
    }

    #[test]
    fn summary_of_constant_rows_has_zero_stderr() {
        let s = Summary::of(&[0.1; 10]);
        assert_eq!(s.stderr, 0.0);
        assert!(s.mean >= s.min && s.mean <= s.max);
    }

    #[test]
    fn summary_is_permutation_stable() {
        let xs: Vec<f64> = (0..1000).map(|i| 1.0 / (i as f64 + 1.0) * if i % 3 == 0 { 1e8 } else { 1e-8 }).collect();
        let mut rev = xs.clone();
        rev.reverse();
        assert_eq!(Summary::of(&xs).mean, Summary::of(&rev).mean);
    }

    #[test]
    fn tail_examples() {
        let zeros = vec![0.0; 20];
        assert!(tail_diagnostic(&zeros, &[0.5, 1.0]).unwrap().iter().all(|e| e.fraction == 0.0));
        let ramp: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        assert_eq!(tail_diagnostic(&ramp, &[50.0]).unwrap()[0].fraction, 0.5);
        assert!(tail_diagnostic(&[], &[1.0]).is_err());
    }

    #[test]
    fn quorum_tolerates_isolated_failures() {
        let ok = run_members(20, 1, |i, _| if i == 3 { Err(Error::Validation("x".into())) } else { Ok(i) }).unwrap();
        assert_eq!(successes(&ok).len(), 19);
        let bad = run_members(20, 1, |i, _| if i < 3 { Err(Error::Validation("x".into())) } else { Ok(i) });
        assert!(matches!(bad, Err(Error::Ensemble { failed: 3, total: 20, .. })));
    }

    #[test]
    fn seeds_do_not_depend_on_workers() {
        let a = with_workers(1, || run_members(16, 9, |_, s| Ok(s)).unwrap()).unwrap();
        let b = with_workers(4, || run_members(16, 9, |_, s| Ok(s)).unwrap()).unwrap();
        let sa: Vec<u64> = a.iter().map(|m| m.seed).collect();
        let sb: Vec<u64> = b.iter().map(|m| m.seed).collect();
        assert_eq!(sa, sb);
    }
}
