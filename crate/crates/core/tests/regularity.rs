use homog_core::field::{sample_field, scaled_identity, to_mat3, HomogeneousMedium, LagrangianSpec, Material};
use homog_core::geometry::{BoxDomain, Grid};
use homog_core::regularity::{
    dyadic_radii, improvement_of_flatness_check, local_minimizer, oscillation_profile, quenched_lipschitz_experiment,
    QuenchedRequest,
};
use homog_core::solver::{GridFunction, Role};
use homog_core::Error;
use proptest::prelude::*;

fn grid(half: f64, h: f64) -> Grid {
    Grid::new(BoxDomain::centered(2, half), h).unwrap()
}

#[test]
fn affine_profile() {
    let u = GridFunction::affine(grid(10.0, 0.25), Role::U, &[0.6, -0.8]);
    // radii chosen so that ±r·p/|p| are grid nodes and the discrete diameter is exact
    let prof = oscillation_profile(&u, &[0.0, 0.0], &[1.25, 2.5, 5.0, 10.0]).unwrap();
    for i in 0..4 {
        assert!((prof.normalized[i] - 2.0).abs() < 1e-12, "{}", prof.normalized[i]);
        assert!(prof.flatness[i] < 1e-9, "{}", prof.flatness[i]);
        assert!((prof.p_star[i][0] - 0.6).abs() < 1e-6 && (prof.p_star[i][1] + 0.8).abs() < 1e-6);
    }
}

#[test]
fn constant_profile() {
    let u = GridFunction::from_fn(grid(10.0, 0.25), Role::U, |_| 3.0);
    let prof = oscillation_profile(&u, &[1.0, -1.0], &[1.0, 2.0, 4.0]).unwrap();
    assert!(prof.osc.iter().chain(&prof.normalized).chain(&prof.flatness).all(|v| *v == 0.0));
}

#[test]
fn ball_outside_grid_is_rejected() {
    let u = GridFunction::zeros(grid(4.0, 0.5), Role::U);
    assert!(matches!(oscillation_profile(&u, &[0.0, 0.0], &[5.0]), Err(Error::Geometry(_))));
}

#[test]
fn quadratic_flatness_scales_linearly() {
    let u = GridFunction::from_fn(grid(10.0, 0.25), Role::U, |x| x[0] * x[0] + x[1] * x[1]);
    let prof = oscillation_profile(&u, &[0.0, 0.0], &[2.0, 8.0]).unwrap();
    assert!((prof.flatness[0] - 2.0).abs() < 1e-6 && (prof.flatness[1] - 8.0).abs() < 1e-6, "{:?}", prof.flatness);
    let chk = improvement_of_flatness_check(&u, &[0.0, 0.0], 8.0, 0.25).unwrap();
    assert!(chk.holds && (chk.ratio - 0.25).abs() < 1e-6, "{chk:?}");
}

#[test]
fn affine_improvement_is_zero_over_zero() {
    let u = GridFunction::affine(grid(10.0, 0.25), Role::U, &[1.0, 2.0]);
    let chk = improvement_of_flatness_check(&u, &[0.0, 0.0], 8.0, 0.25).unwrap();
    assert!(chk.holds && chk.ratio == 0.0);
    assert!(improvement_of_flatness_check(&u, &[0.0, 0.0], 8.0, 0.75).is_err());
}

#[test]
fn homogenized_laminate_minimizer_improves() {
    let hom = HomogeneousMedium::new(2, Material::quadratic(to_mat3(&[vec![1.6, 0.0], vec![0.0, 2.5]])), 1.0);
    let v = local_minimizer(&hom, 16.0, &[1.0, 0.5], 0.25).unwrap();
    let chk = improvement_of_flatness_check(&v, &[0.0, 0.0], 8.0, 0.25).unwrap();
    assert!(chk.holds, "{chk:?}");
}

#[test]
fn profile_invariants_on_heterogeneous_minimizer() {
    let spec = LagrangianSpec::two_phase(2, 1.0, 4.0, 4.0);
    let field = sample_field(&spec, 4, BoxDomain::centered(2, 9.0)).unwrap();
    let u = local_minimizer(&field, 9.0, &[1.0, 0.0], 0.25).unwrap();
    let prof = oscillation_profile(&u, &[0.0, 0.0], &dyadic_radii(9.0)).unwrap();
    assert!(prof.osc.windows(2).all(|w| w[1] >= w[0]));
    assert!(prof.flatness.iter().zip(&prof.normalized).all(|(f, n)| *f <= *n));
    assert_eq!(prof.radii, vec![1.0, 2.0, 4.0, 4.5]);
}

#[test]
fn constant_coefficients_have_smallest_y() {
    let req = QuenchedRequest {
        spec: LagrangianSpec::constant(scaled_identity(2, 1.0), 1.0),
        radii: vec![9.0],
        samples: 20,
        h: 0.5,
        slope: vec![1.0, 0.0],
        constant: 3.0,
        thresholds: vec![1.0, 2.0, 4.0],
    };
    let rep = quenched_lipschitz_experiment(&req, 1).unwrap();
    assert!(rep.rows.iter().all(|r| r.y == 1.0));
    let tail: Vec<f64> = rep.scales[0].tail.iter().map(|e| e.fraction).collect();
    assert!(tail.windows(2).all(|w| w[1] <= w[0]));
    let mut buf = Vec::new();
    rep.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("seed,R,r,osc,flatness,p_star0,p_star1\n"));
    assert_eq!(text.lines().count(), 1 + 20 * 4);
    let mut few = req.clone();
    few.samples = 5;
    assert!(quenched_lipschitz_experiment(&few, 1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// `p ↦ osc(u − p·x)` is convex along segments.
    #[test]
    fn tilted_oscillation_is_convex(a in -1.0f64..1.0, b in -1.0f64..1.0, c in -1.0f64..1.0, e in -1.0f64..1.0, seed in 0u64..100) {
        let spec = LagrangianSpec::two_phase(2, 1.0, 4.0, 4.0);
        let field = sample_field(&spec, seed, BoxDomain::centered(2, 4.0)).unwrap();
        let u = local_minimizer(&field, 4.0, &[1.0, 0.0], 0.5).unwrap();
        let osc = |p: [f64; 2]| {
            let t = GridFunction::from_fn(u.grid, Role::Generic, |x| -(p[0] * x[0] + p[1] * x[1]));
            let mut w = u.clone();
            w.values.iter_mut().zip(&t.values).for_each(|(v, s)| *v += s);
            oscillation_profile(&w, &[0.0, 0.0], &[3.0]).unwrap().osc[0]
        };
        let mid = osc([(a + c) / 2.0, (b + e) / 2.0]);
        prop_assert!(mid <= 0.5 * (osc([a, b]) + osc([c, e])) + 1e-9);
    }
}
