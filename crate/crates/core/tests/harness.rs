use homog_core::field::{scaled_identity, LagrangianSpec};
use homog_core::harness::{run_ensemble, EnsembleTask, TaskKind};
use homog_core::Error;
use serde_json::json;

fn checkerboard() -> serde_json::Value {
    serde_json::to_value(LagrangianSpec::two_phase(2, 1.0, 4.0, 4.0)).unwrap()
}

fn task(kind: TaskKind, params: serde_json::Value, samples: usize, workers: usize) -> EnsembleTask {
    EnsembleTask { kind, params, samples, base_seed: 17, workers }
}

fn csv(stats: &homog_core::harness::EnsembleStats) -> String {
    let mut buf = Vec::new();
    stats.write_csv(&mut buf).unwrap();
    String::from_utf8(buf).unwrap()
}

#[test]
fn single_member_stats_equal_the_row() {
    let params = json!({"spec": checkerboard(), "cell": "mu", "n": 1, "vector": [1.0, 0.5], "h": 0.5});
    let s = run_ensemble(&task(TaskKind::Cell, params, 1, 1)).unwrap();
    assert_eq!(s.columns, vec!["value", "P0", "P1"]);
    for (j, st) in s.stats.iter().enumerate() {
        assert_eq!(st.mean, s.rows[0].values[j]);
        assert_eq!(st.min, st.max);
        assert_eq!(st.stderr, 0.0);
    }
}

#[test]
fn constant_mu_has_zero_stderr() {
    let spec = serde_json::to_value(LagrangianSpec::constant(scaled_identity(2, 1.0), 1.0)).unwrap();
    let params = json!({"spec": spec, "cell": "mu", "n": 1, "vector": [2.0, 0.0], "h": 0.5});
    let s = run_ensemble(&task(TaskKind::Cell, params, 10, 0)).unwrap();
    let v = s.column("value").unwrap();
    assert_eq!(v.stderr, 0.0);
    assert!((v.mean + 1.0).abs() < 1e-9, "{}", v.mean);
}

#[test]
fn worker_count_does_not_change_bytes() {
    let params = json!({"spec": checkerboard(), "n": 1, "p": [1.0, 0.0], "q": [2.0, 0.0], "h": 0.5});
    let a = run_ensemble(&task(TaskKind::Effective, params.clone(), 12, 1)).unwrap();
    let b = run_ensemble(&task(TaskKind::Effective, params, 12, 3)).unwrap();
    assert_eq!(csv(&a), csv(&b));
    assert!(a.rows.iter().all(|r| r.values[2] >= -1e-9));
}

#[test]
fn every_kind_runs() {
    let spec = checkerboard();
    let model = json!({"spec": spec.clone()});
    let cases = vec![
        (TaskKind::Variance, json!({"spec": spec, "q": [2.0, 0.0], "n": 1, "h": 0.5}), 3),
        (TaskKind::Regularity, json!({"spec": spec, "big_r": 4.0, "h": 0.5}), 2),
        (
            TaskKind::Patching,
            json!({"spec": spec, "request": {"n": 1, "q": [2.0, 0.0], "pbar": [0.62, 0.0], "h": 0.5}}),
            6,
        ),
    ];
    for (kind, params, width) in cases {
        let s = run_ensemble(&task(kind, params, 2, 0)).unwrap();
        assert_eq!(s.columns.len(), width);
        assert!(s.rows.iter().all(|r| r.values.len() == width && r.error.is_none()));
    }
    let bad = run_ensemble(&task(TaskKind::Dirichlet, json!({"experiment": model, "h": 0.5}), 2, 0));
    assert!(matches!(bad, Err(Error::Validation(_))));
}

#[test]
fn malformed_params_are_validation_errors() {
    let params = json!({"spec": checkerboard(), "cell": "mu", "n": 1, "vector": [1.0], "h": 0.5});
    assert!(matches!(run_ensemble(&task(TaskKind::Cell, params, 2, 0)), Err(Error::Validation(_))));
    let params = json!({"spec": checkerboard(), "cell": "sideways", "n": 1, "vector": [1.0, 0.0], "h": 0.5});
    assert!(matches!(run_ensemble(&task(TaskKind::Cell, params, 2, 0)), Err(Error::Validation(_))));
    let params = json!({"spec": checkerboard(), "q": [2.0, 0.0], "n": 1, "h": 0.5});
    assert!(matches!(run_ensemble(&task(TaskKind::Variance, params, 0, 0)), Err(Error::Validation(_))));
}
