use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use homog_core::effective::{dual_check, estimate_effective, homogenized_material, variance_decay, EffectiveModel};
use homog_core::field::{derive_seed, to_mat3, HomogeneousMedium, Material};
use homog_core::harness::{run_ensemble, with_workers, EnsembleTask, TaskKind};
use homog_core::homogenize::{dirichlet_error, patching_check, DirichletExperiment, PatchRequest};
use homog_core::regularity::{improvement_of_flatness_check, local_minimizer, quenched_lipschitz_experiment, QuenchedRequest};
use homog_core::Error;
use serde_json::json;

use crate::config::{self, parse, resolve_spec};
use crate::output::{f, gnuplot, timing, OutDir, Summary};
use crate::{Args, Command, Failure};

/// Shared state of one invocation.
struct Run<'a> {
    args: &'a Args,
    text: String,
    seed: u64,
    out: OutDir,
    started: Instant,
}

impl Run<'_> {
    fn summary(&self, result: impl serde::Serialize, extra_timing: Option<serde_json::Value>) -> Result<(), Failure> {
        let mut t = timing(self.started.elapsed().as_secs_f64() * 1e3);
        if let (Some(serde_json::Value::Object(extra)), serde_json::Value::Object(base)) = (extra_timing, &mut t) {
            base.extend(extra);
        }
        self.out.summary(&Summary {
            command: self.args.command.name(),
            version: env!("CARGO_PKG_VERSION"),
            seed: self.seed,
            workers: self.args.workers,
            config: self.text.clone(),
            result,
            timing: t,
        })
    }

    /// Map a library error, saving partial results of budget stops.
    fn check<T>(&self, r: homog_core::Result<T>) -> Result<T, Failure> {
        if let Err(Error::Budget { partial: Some(json), .. }) = &r {
            self.out.partial(json)?;
        }
        r.map_err(Failure::from)
    }
}

/// Seed and output directory: flags beat the config, which beats the defaults.
fn settle(args: &Args, seed: u64, out: &Option<PathBuf>) -> (u64, PathBuf) {
    (args.seed.unwrap_or(seed), args.out.clone().or_else(|| out.clone()).unwrap_or_else(|| PathBuf::from("out")))
}

pub fn run(args: &Args) -> Result<PathBuf, Failure> {
    let bytes = fs::read(&args.config)
        .map_err(|e| Failure::Validation(format!("cannot read config {}: {e}", args.config.display())))?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|_| Failure::Validation(format!("{} is not UTF-8", args.config.display())))?;
    let path = args.config.as_path();
    let (seed, out_dir, job): (u64, PathBuf, Job) = match args.command {
        Command::EstimateEffective | Command::DualityCheck => {
            let c: config::EffectiveConfig = parse(&text, path)?;
            let (seed, dir) = settle(args, c.seed, &c.out);
            (seed, dir, Job::Effective(c))
        }
        Command::DirichletError => {
            let c: config::DirichletConfig = parse(&text, path)?;
            let (seed, dir) = settle(args, c.seed, &c.out);
            (seed, dir, Job::Dirichlet(c))
        }
        Command::Regularity => {
            let c: config::RegularityConfig = parse(&text, path)?;
            let (seed, dir) = settle(args, c.seed, &c.out);
            (seed, dir, Job::Regularity(c))
        }
        Command::VarianceDecay => {
            let c: config::VarianceConfig = parse(&text, path)?;
            let (seed, dir) = settle(args, c.seed, &c.out);
            (seed, dir, Job::Variance(c))
        }
        Command::PatchingCheck => {
            let c: config::PatchingConfig = parse(&text, path)?;
            let (seed, dir) = settle(args, c.seed, &c.out);
            (seed, dir, Job::Patching(c))
        }
        Command::Cell => {
            let c: config::CellConfig = parse(&text, path)?;
            let (seed, dir) = settle(args, c.seed, &c.out);
            (seed, dir, Job::Cell(c))
        }
    };
    let out = OutDir::create(out_dir)?;
    out.echo_config(&bytes)?;
    let run = Run { args, text, seed, out, started: Instant::now() };
    with_workers(args.workers, || job.execute(&run))??;
    Ok(run.out.dir.clone())
}

enum Job {
    Effective(config::EffectiveConfig),
    Dirichlet(config::DirichletConfig),
    Regularity(config::RegularityConfig),
    Variance(config::VarianceConfig),
    Patching(config::PatchingConfig),
    Cell(config::CellConfig),
}

impl Job {
    fn execute(&self, run: &Run) -> Result<(), Failure> {
        let path = run.args.config.as_path();
        match self {
            Job::Effective(c) if run.args.command == Command::DualityCheck => duality(run, c, path),
            Job::Effective(c) => effective(run, c, path),
            Job::Dirichlet(c) => dirichlet(run, c, path),
            Job::Regularity(c) => regularity(run, c, path),
            Job::Variance(c) => variance(run, c, path),
            Job::Patching(c) => patching(run, c, path),
            Job::Cell(c) => cell(run, c, path),
        }
    }
}

fn point_header(prefix: &str, d: usize) -> impl Iterator<Item = String> + '_ {
    (0..d).map(move |k| format!("{prefix}{k}"))
}

fn write_model_tables(run: &Run, model: &EffectiveModel) -> Result<(), Failure> {
    let d = model.dim;
    let mut header = vec!["index".to_string()];
    header.extend(point_header("p", d));
    header.extend(["lbar".to_string(), "stderr".into()]);
    header.extend(point_header("dlbar", d));
    let rows: Vec<Vec<String>> = model
        .p_grid
        .points()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut r = vec![i.to_string()];
            r.extend(p.iter().map(|v| f(*v)));
            r.extend([f(model.lbar[i]), f(model.lbar_stderr[i])]);
            match &model.dlbar[i] {
                Some(g) => r.extend(g.iter().map(|v| f(*v))),
                None => r.extend((0..d).map(|_| String::new())),
            }
            r
        })
        .collect();
    run.out.table("lbar.csv", &header, &rows)?;

    let mut header = vec!["index".to_string()];
    header.extend(point_header("q", d));
    header.extend(["mubar".to_string(), "stderr".into()]);
    header.extend(point_header("pbar", d));
    let rows: Vec<Vec<String>> = model
        .q_grid
        .points()
        .iter()
        .enumerate()
        .map(|(j, q)| {
            let mut r = vec![j.to_string()];
            r.extend(q.iter().map(|v| f(*v)));
            r.extend([f(model.mubar[j]), f(model.mubar_stderr[j])]);
            r.extend(model.pbar[j].iter().map(|v| f(*v)));
            r
        })
        .collect();
    run.out.table("mubar.csv", &header, &rows)?;
    run.out.csv("scales.csv", |w| model.write_scale_csv(w))
}

fn effective(run: &Run, c: &config::EffectiveConfig, path: &Path) -> Result<(), Failure> {
    let req = c.request(path, run.seed)?;
    let model = run.check(estimate_effective(&req))?;
    write_model_tables(run, &model)?;
    let fit = homogenized_material(&model).ok();
    run.summary(
        json!({
            "model": model,
            "quadratic_fit": fit.map(|m| m.a),
            "gradient_lipschitz_ratio": model.gradient_lipschitz_ratio(),
        }),
        None,
    )?;
    let mut plot = gnuplot("effective Lagrangian");
    plot.push_str(if model.dim == 2 {
        "splot 'lbar.csv' using 2:3:4 with points title 'Lbar(p)', \\\n      'mubar.csv' using 2:3:4 with points title 'mubar(q)'\n"
    } else {
        "plot 'lbar.csv' using 1:5:6 with yerrorbars title 'Lbar by lattice index'\n"
    });
    run.out.plot(&plot)
}

fn duality(run: &Run, c: &config::EffectiveConfig, path: &Path) -> Result<(), Failure> {
    let req = c.request(path, run.seed)?;
    let model = run.check(estimate_effective(&req))?;
    let check = run.check(dual_check(&model))?;
    let d = model.dim;
    let mut header = vec!["direction".to_string(), "index".into()];
    header.extend(point_header("x", d));
    header.extend(["table_value".to_string(), "sup".into()]);
    header.extend(point_header("argmax", d));
    header.extend(["residual".to_string(), "budget".into(), "on_boundary".into()]);
    let mut rows = Vec::new();
    for (dir, list) in [("forward", &check.forward), ("reverse", &check.reverse)] {
        for (i, r) in list.iter().enumerate() {
            let mut rec = vec![dir.to_string(), i.to_string()];
            rec.extend(r.point.iter().map(|v| f(*v)));
            rec.extend([f(r.table_value), f(r.sup)]);
            rec.extend(r.argmax.iter().map(|v| f(*v)));
            rec.extend([f(r.residual), f(r.budget), r.on_boundary.to_string()]);
            rows.push(rec);
        }
    }
    run.out.table("residuals.csv", &header, &rows)?;
    let all: Vec<_> = check.forward.iter().chain(&check.reverse).collect();
    let interior: Vec<_> = all.iter().filter(|r| !r.on_boundary).collect();
    let max_abs = |rs: &[&&homog_core::effective::DualRow]| rs.iter().map(|r| r.residual.abs()).fold(0.0f64, f64::max);
    let within = interior.iter().filter(|r| r.residual.abs() <= r.budget).count();
    run.summary(
        json!({
            "max_abs_residual": max_abs(&all.iter().collect::<Vec<_>>()),
            "max_abs_interior_residual": max_abs(&interior),
            "interior_points": interior.len(),
            "interior_within_budget": within,
            "warnings": check.warnings,
        }),
        None,
    )?;
    let mut plot = gnuplot("duality residuals");
    let (ri, bi) = (2 * d + 5, 2 * d + 6);
    plot.push_str(&format!(
        "plot 'residuals.csv' using 0:{ri} with points title 'residual', '' using 0:{bi} with lines title 'budget'\n"
    ));
    run.out.plot(&plot)
}

fn dirichlet(run: &Run, c: &config::DirichletConfig, path: &Path) -> Result<(), Failure> {
    let spec = resolve_spec(&c.spec, &c.spec_file, path)?;
    let d = spec.dimension;
    let stage = &c.effective;
    let req = homog_core::effective::EstimateRequest {
        spec: spec.clone(),
        p_grid: config::lattice(d, stage.p_grid)?,
        q_grid: config::lattice(d, stage.q_grid)?,
        scales: stage.scales.clone(),
        samples: stage.samples,
        h: stage.h.unwrap_or(c.h),
        seed: stage.seed.unwrap_or(run.seed),
        max_nodes: c.max_nodes,
    };
    let t0 = Instant::now();
    let model = run.check(estimate_effective(&req))?;
    let effective_ms = t0.elapsed().as_secs_f64() * 1e3;
    let exp = DirichletExperiment {
        spec,
        side: c.side,
        datum: c.datum.clone(),
        scales: c.scales.clone(),
        samples: c.samples,
        max_nodes: c.max_nodes,
    };
    let report = run.check(dirichlet_error(&exp, &model, c.h, run.seed))?;
    run.out.csv("errors.csv", |w| report.write_csv(w))?;
    let header: Vec<String> = [
        "epsilon", "l2_mean", "l2_stderr", "linf_mean", "linf_stderr", "gap_mean", "gap_stderr", "hom_energy",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let rows: Vec<Vec<String>> = report
        .scales
        .iter()
        .map(|s| {
            vec![
                f(s.epsilon),
                f(s.l2.mean),
                f(s.l2.stderr),
                f(s.linf.mean),
                f(s.linf.stderr),
                f(s.gap.mean),
                f(s.gap.stderr),
                f(s.hom_energy),
            ]
        })
        .collect();
    run.out.table("scales.csv", &header, &rows)?;
    let runtimes: Vec<_> =
        report.rows.iter().map(|r| json!({"epsilon": r.epsilon, "sample": r.sample, "runtime_ms": r.runtime_ms})).collect();
    run.summary(
        json!({
            "alpha_hat": report.rate.as_ref().map(|r| r.alpha),
            "rate": report.rate,
            "scales": report.scales,
            "data_bound": report.data_bound,
            "min_het_sandwich": report.min_het_sandwich,
            "min_hom_sandwich": report.min_hom_sandwich,
            "failed": report.failed,
            "homogenized_a": homogenized_material(&model)?.a,
        }),
        Some(json!({"effective_ms": effective_ms, "members": runtimes})),
    )?;
    let mut plot = gnuplot("Dirichlet error against epsilon");
    plot.push_str(
        "set logscale xy\nset xlabel 'epsilon'\n\
         plot 'scales.csv' using 1:2:3 with yerrorlines title 'L2 error', \\\n     \
         '' using 1:4:5 with yerrorlines title 'Linf error', \\\n     \
         '' using 1:6:7 with yerrorlines title 'energy gap'\n",
    );
    run.out.plot(&plot)
}

fn regularity(run: &Run, c: &config::RegularityConfig, path: &Path) -> Result<(), Failure> {
    let spec = resolve_spec(&c.spec, &c.spec_file, path)?;
    let d = spec.dimension;
    let req = QuenchedRequest {
        spec,
        radii: c.radii.clone(),
        samples: c.samples,
        h: c.h,
        slope: c.slope.clone(),
        constant: c.constant,
        thresholds: c.thresholds.clone(),
    };
    let report = run.check(quenched_lipschitz_experiment(&req, run.seed))?;
    run.out.csv("profiles.csv", |w| report.write_csv(w))?;
    let header: Vec<String> = ["seed", "R", "y", "max_normalized"].iter().map(|s| s.to_string()).collect();
    let rows: Vec<Vec<String>> =
        report.rows.iter().map(|r| vec![r.seed.to_string(), f(r.big_r), f(r.y), f(r.max_normalized)]).collect();
    run.out.table("y.csv", &header, &rows)?;
    let header: Vec<String> = ["R", "threshold", "fraction", "log_fraction"].iter().map(|s| s.to_string()).collect();
    let rows: Vec<Vec<String>> = report
        .scales
        .iter()
        .flat_map(|s| s.tail.iter().map(move |e| vec![f(s.big_r), f(e.threshold), f(e.fraction), f(e.log_fraction)]))
        .collect();
    run.out.table("tail.csv", &header, &rows)?;
    let improvement = match &c.improvement {
        Some(imp) => {
            if imp.a.len() != d || imp.a.iter().any(|row| row.len() != d) {
                return Err(Failure::Validation(format!("improvement matrix must be {d}×{d}")));
            }
            let hom = HomogeneousMedium::new(d, Material::quadratic(to_mat3(&imp.a)), 1.0);
            let v = run.check(local_minimizer(&hom, imp.big_r, &imp.slope, c.h))?;
            Some(run.check(improvement_of_flatness_check(&v, &vec![0.0; d], imp.r, imp.theta))?)
        }
        None => None,
    };
    run.summary(
        json!({
            "data_bound": report.data_bound,
            "threshold": c.constant * report.data_bound,
            "scales": report.scales,
            "failed": report.failed,
            "improvement_of_flatness": improvement,
        }),
        None,
    )?;
    let mut plot = gnuplot("oscillation profiles");
    plot.push_str(
        "set multiplot layout 1,2\n\
         set xlabel 'r'\nset ylabel 'osc / r'\n\
         plot 'profiles.csv' using 3:($4/$3) with points pt 7 ps 0.4 title 'osc/r'\n\
         set xlabel 'y'\nset ylabel 'P[Y > y]'\n\
         plot 'tail.csv' using 2:3 with linespoints title 'tail'\n\
         unset multiplot\n",
    );
    run.out.plot(&plot)
}

fn variance(run: &Run, c: &config::VarianceConfig, path: &Path) -> Result<(), Failure> {
    let spec = resolve_spec(&c.spec, &c.spec_file, path)?;
    let d = spec.dimension;
    let v = run.check(variance_decay(&spec, &c.q, &c.scales, c.samples, c.h, run.seed))?;
    let mut header: Vec<String> =
        ["n", "var_p", "bound", "mean_mu", "mean_mu_next", "delta_e", "term"].iter().map(|s| s.to_string()).collect();
    header.extend(point_header("pbar", d));
    let rows: Vec<Vec<String>> = v
        .rows
        .iter()
        .map(|r| {
            let mut rec =
                vec![r.n.to_string(), f(r.var_p), f(r.bound), f(r.mean_mu), f(r.mean_mu_next), f(r.delta_e), f(r.term)];
            rec.extend(r.mean_p.iter().map(|x| f(*x)));
            rec
        })
        .collect();
    run.out.table("variance.csv", &header, &rows)?;
    let decreasing = v.rows.windows(2).all(|w| w[1].var_p < w[0].var_p);
    let bounded = v.rows.iter().all(|r| r.var_p <= r.bound * (1.0 + 1e-12));
    run.summary(json!({"decay": v, "strictly_decreasing": decreasing, "within_bound": bounded}), None)?;
    let mut plot = gnuplot("variance of P over trimmed cubes");
    plot.push_str(
        "set logscale y\nset xlabel 'n'\n\
         plot 'variance.csv' using 1:2 with linespoints title 'var P', '' using 1:3 with lines title 'calibrated bound'\n",
    );
    run.out.plot(&plot)
}

fn patching(run: &Run, c: &config::PatchingConfig, path: &Path) -> Result<(), Failure> {
    let spec = resolve_spec(&c.spec, &c.spec_file, path)?;
    if c.scales.is_empty() {
        return Err(Failure::Validation("patching needs at least one scale".into()));
    }
    let mut header: Vec<String> = ["n", "seed", "candidate", "nu", "mu_n", "gap", "admissibility", "helmholtz_residual"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(["psi_defect".to_string(), "xi_thickness".into()]);
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for &n in &c.scales {
        let pbar = match &c.pbar {
            Some(p) => p.clone(),
            None => {
                let samples = c.pbar_samples.unwrap_or(c.samples);
                let v = run.check(variance_decay(&spec, &c.q, &[n], samples, c.h, derive_seed(run.seed, 2 * n as u64)))?;
                v.rows[0].mean_p.clone()
            }
        };
        let req = PatchRequest { n, q: c.q.clone(), pbar, h: c.h, delta: c.delta };
        let s = run.check(patching_check(&spec, &req, c.samples, derive_seed(run.seed, 2 * n as u64 + 1)))?;
        for r in &s.rows {
            rows.push(vec![
                n.to_string(),
                r.seed.to_string(),
                f(r.candidate_energy),
                f(r.nu),
                f(r.mu_n),
                f(r.gap),
                f(r.admissibility),
                f(r.helmholtz_residual),
                f(r.psi_defect),
                f(r.xi_thickness),
            ]);
        }
        summaries.push(json!({
            "n": n,
            "pbar": req.pbar,
            "gap": s.gap,
            "candidate": s.candidate,
            "nu": s.nu,
            "mu_n": s.mu_n,
            "min_admissibility": s.min_admissibility,
            "failed": s.failed,
        }));
    }
    run.out.table("patching.csv", &header, &rows)?;
    run.summary(json!({"q": c.q, "delta": c.delta, "scales": summaries}), None)?;
    let mut plot = gnuplot("patching gap by scale");
    plot.push_str(
        "set xlabel 'n'\n\
         plot 'patching.csv' using 1:6 with points title 'gap', '' using 1:7 with points title 'admissibility'\n",
    );
    run.out.plot(&plot)
}

fn cell(run: &Run, c: &config::CellConfig, path: &Path) -> Result<(), Failure> {
    let spec = resolve_spec(&c.spec, &c.spec_file, path)?;
    let task = EnsembleTask {
        kind: TaskKind::Cell,
        params: json!({"spec": spec, "cell": c.kind, "n": c.n, "vector": c.vector, "h": c.h, "trimmed": c.trimmed}),
        samples: c.samples,
        base_seed: run.seed,
        workers: run.args.workers,
    };
    let stats = run.check(run_ensemble(&task))?;
    run.out.csv("members.csv", |w| stats.write_csv(w))?;
    let columns: serde_json::Map<String, serde_json::Value> =
        stats.columns.iter().zip(&stats.stats).map(|(c, s)| (c.clone(), json!(s))).collect();
    run.summary(json!({"task": task, "stats": columns, "failed": stats.failed}), Some(json!({"members_ms": stats.elapsed_ms})))?;
    let mut plot = gnuplot("cell problem values per member");
    plot.push_str("set xlabel 'member'\nplot 'members.csv' using 1:3 with points title 'value'\n");
    run.out.plot(&plot)
}
