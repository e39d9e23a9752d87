use homog_core::cell::{duality_gap, error_functional, mu, nu, subadditivity_defect, superadditivity_defect};
use homog_core::effective::{EffectiveModel, Lattice};
use homog_core::field::{sample_field, scaled_identity, Family, FieldRealization, LagrangianSpec, Layout};
use homog_core::geometry::{trimmed_cube, triadic_cube, BoxDomain};
use proptest::prelude::*;

fn constant(a: Vec<Vec<f64>>, lambda: f64) -> FieldRealization {
    sample_field(&LagrangianSpec::constant(a, lambda), 0, BoxDomain::centered(2, 50.0)).unwrap()
}

fn laminate() -> FieldRealization {
    let mut spec = LagrangianSpec::two_phase(2, 1.0, 4.0, 4.0);
    spec.layout = Layout::Laminate { axis: 0, random_offset: false };
    sample_field(&spec, 0, BoxDomain::centered(2, 50.0)).unwrap()
}

fn checkerboard(seed: u64) -> FieldRealization {
    sample_field(&LagrangianSpec::two_phase(2, 1.0, 4.0, 4.0), seed, BoxDomain::centered(2, 50.0)).unwrap()
}

fn perturbed(seed: u64) -> FieldRealization {
    let mut spec = LagrangianSpec::two_phase(2, 1.0, 3.5, 4.0);
    spec.family = Family::QuadraticPlusPerturbation;
    spec.kappa = 0.5;
    sample_field(&spec, seed, BoxDomain::centered(2, 50.0)).unwrap()
}

/// Arithmetic and harmonic means of layer conductivities, the parallel and series oracles.
fn parallel(layers: &[f64]) -> f64 {
    layers.iter().sum::<f64>() / layers.len() as f64
}

fn series(layers: &[f64]) -> f64 {
    layers.len() as f64 / layers.iter().map(|a| 1.0 / a).sum::<f64>()
}

fn q1() -> homog_core::geometry::Cube {
    triadic_cube(2, 1, &[0.0, 0.0])
}

#[test]
fn mu_constant_identity() {
    let f = constant(scaled_identity(2, 1.0), 1.0);
    let r = mu(&f, &q1(), &[2.0, 0.0], 0.25).unwrap();
    assert!((r.value + 1.0).abs() < 1e-10);
    assert!((r.slope[0] - 1.0).abs() < 1e-10 && r.slope[1].abs() < 1e-10);
    assert!(r.minimizer.mean().abs() < 1e-12);
}

#[test]
fn mu_constant_anisotropic() {
    let f = constant(vec![vec![1.0, 0.0], vec![0.0, 4.0]], 4.0);
    let r = mu(&f, &q1(), &[0.0, 4.0], 0.25).unwrap();
    assert!((r.value + 1.0).abs() < 1e-10);
    assert!(r.slope[0].abs() < 1e-10 && (r.slope[1] - 0.5).abs() < 1e-10);
}

#[test]
fn mu_vanishes_at_zero_tilt() {
    let f = checkerboard(1);
    let r = mu(&f, &triadic_cube(2, 2, &[0.0, 0.0]), &[0.0, 0.0], 0.25).unwrap();
    assert_eq!(r.value, 0.0);
    assert!(r.slope.iter().all(|v| *v == 0.0));
}

#[test]
fn nu_constant_is_quadratic_form() {
    let f = constant(vec![vec![2.0, 0.5], vec![0.5, 1.5]], 3.0);
    let p = [0.7, -1.2];
    let r = nu(&f, &q1(), &p, 0.25).unwrap();
    let exact = 2.0 * p[0] * p[0] + 2.0 * 0.5 * p[0] * p[1] + 1.5 * p[1] * p[1];
    assert!((r.value - exact).abs() < 1e-12);
    let g = r.minimizer.grid;
    for i in 0..g.n_nodes() {
        if g.is_boundary(i) {
            let x = g.node_coord(i);
            assert_eq!(r.minimizer.values[i], p[0] * x[0] + p[1] * x[1]);
        }
    }
}

#[test]
fn nu_laminate_oracles() {
    let f = laminate();
    let cube = triadic_cube(2, 3, &[0.0, 0.0]);
    let across = nu(&f, &cube, &[1.0, 0.0], 0.25).unwrap().value;
    let s = series(&[1.0, 4.0]);
    assert!(across >= s && across <= s * 1.05, "{across}");
    let along = nu(&f, &cube, &[0.0, 1.0], 0.25).unwrap().value;
    assert!((along / parallel(&[1.0, 4.0]) - 1.0).abs() < 0.05, "{along}");
}

#[test]
fn duality_gap_examples() {
    let f = constant(scaled_identity(2, 1.0), 1.0);
    assert!(duality_gap(&f, &q1(), &[1.0, 0.0], &[2.0, 0.0], 0.25).unwrap().abs() < 1e-10);
    assert!((duality_gap(&f, &q1(), &[1.0, 0.0], &[0.0, 0.0], 0.25).unwrap() - 1.0).abs() < 1e-10);
    for seed in 0..4 {
        let g = duality_gap(&checkerboard(seed), &q1(), &[1.0, 0.0], &[2.0, 0.0], 0.25).unwrap();
        assert!(g >= -1e-9, "{g}");
    }
}

#[test]
fn bounds_hold() {
    for seed in 0..3 {
        let f = checkerboard(seed);
        let k0 = 1.0;
        let lambda = 4.0;
        for v in [[1.0f64, 0.0], [2.0, -1.0], [-0.5, 3.0]] {
            let n = v[0].hypot(v[1]);
            let m = mu(&f, &q1(), &v, 0.25).unwrap().value;
            assert!(m <= k0 && m >= -2.0 * (k0 + n).powi(2));
            let nv = nu(&f, &q1(), &v, 0.25).unwrap().value;
            assert!(nv >= n * n - k0 * (1.0 + n) && nv <= lambda * n * n + k0 * (1.0 + n));
        }
    }
}

#[test]
fn nested_additivity_is_exact() {
    for seed in 0..3 {
        let f = checkerboard(seed);
        let cube = triadic_cube(2, 2, &[0.0, 0.0]);
        assert!(superadditivity_defect(&f, &cube, &[2.0, 0.0], 0.25).unwrap() <= 1e-8);
        assert!(subadditivity_defect(&f, &cube, &[1.0, 0.0], 0.25).unwrap() <= 1e-8);
        let g = perturbed(seed);
        assert!(superadditivity_defect(&g, &q1(), &[1.0, 1.0], 0.5).unwrap() <= 1e-8);
        assert!(subadditivity_defect(&g, &q1(), &[1.0, -0.5], 0.5).unwrap() <= 1e-8);
    }
}

/// The trimmed cube may lose at most `C(K₀+|q|)² 3^{−n}` against the full cube.
#[test]
fn trimmed_comparison() {
    for seed in 0..3 {
        let f = checkerboard(seed);
        let q = [2.0, 0.0];
        for n in 1..=2 {
            let full = mu(&f, &triadic_cube(2, n, &[0.0, 0.0]), &q, 0.25).unwrap().value;
            let trim = mu(&f, &trimmed_cube(2, n, &[0.0, 0.0]).unwrap(), &q, 0.25).unwrap().value;
            assert!(trim <= full + 2.0 * 9.0 * 3f64.powi(-(n as i32)), "{trim} vs {full}");
        }
    }
}

#[test]
fn error_functional_vanishes_for_constant_coefficients() {
    let a = vec![vec![1.0, 0.0], vec![0.0, 4.0]];
    let f = constant(a, 4.0);
    let lat = Lattice::standard(2);
    let model = EffectiveModel::from_functions(
        Family::Quadratic,
        4.0,
        1.0,
        lat,
        lat,
        |p| p[0] * p[0] + 4.0 * p[1] * p[1],
        |q| -(q[0] * q[0] + q[1] * q[1] / 4.0) / 4.0,
        |q| vec![q[0] / 2.0, q[1] / 8.0],
    );
    let e = error_functional(&f, &q1(), &[1.0, 0.5], &model, 0.25).unwrap();
    assert!(e.value < 1e-8, "{e:?}");
    assert!((e.value - e.mu_gap - e.nu_gap - e.flatness).abs() < 1e-15);
    assert!(error_functional(&f, &q1(), &[2.0, 0.0], &model, 0.25).is_err());
}

#[test]
fn csv_row_layout() {
    let f = constant(scaled_identity(2, 1.0), 1.0);
    let r = mu(&f, &q1(), &[2.0, 0.0], 0.25).unwrap();
    let rec = r.csv_record(7);
    assert_eq!(rec.len(), homog_core::cell::CellProblemResult::csv_header(2).len());
    assert_eq!(&rec[..4], &["7", "1", "false", "mu"]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn nu_is_uniformly_convex(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0, c in -2.0f64..2.0, e in -2.0f64..2.0) {
        let f = checkerboard(seed);
        let cube = q1();
        let p1 = [a, b];
        let p2 = [c, e];
        let mid = [(a + c) / 2.0, (b + e) / 2.0];
        let v1 = nu(&f, &cube, &p1, 0.5).unwrap().value;
        let v2 = nu(&f, &cube, &p2, 0.5).unwrap().value;
        let vm = nu(&f, &cube, &mid, 0.5).unwrap().value;
        let defect = 0.5 * v1 + 0.5 * v2 - vm;
        let dist2 = (a - c).powi(2) + (b - e).powi(2);
        prop_assert!(defect >= 0.25 * dist2 - 1e-9);
        prop_assert!(defect <= 4.0 / 4.0 * dist2 + 1e-9);
    }

    #[test]
    fn mu_is_locally_lipschitz(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0, c in -2.0f64..2.0, e in -2.0f64..2.0) {
        // C = 1 suffices for constant coefficients: |q₁|²−|q₂|² over 4 ≤ (|q₁|+|q₂|)|q₁−q₂|/4
        let f = checkerboard(seed);
        let m1 = mu(&f, &q1(), &[a, b], 0.5).unwrap().value;
        let m2 = mu(&f, &q1(), &[c, e], 0.5).unwrap().value;
        let n1 = a.hypot(b);
        let n2 = c.hypot(e);
        prop_assert!((m1 - m2).abs() <= (1.0 + n1 + n2) * (a - c).hypot(b - e) + 1e-9);
    }
}
