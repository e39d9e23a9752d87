use homog_core::effective::{EffectiveModel, Lattice};
use homog_core::field::{sample_field, scaled_identity, Family, LagrangianSpec, Layout};
use homog_core::geometry::{BoxDomain, Grid};
use homog_core::homogenize::{
    coarsen, dirichlet_error, helmholtz_project, linfty_interpolate, patch_candidate, BoundaryDatum, DirichletExperiment,
    PatchRequest,
};
use homog_core::solver::{minimize, Boundary, DiscreteEnergy, GridFunction, PeriodicGrid, Role};
use homog_core::Error;
use proptest::prelude::*;

fn exact_model(a: [[f64; 2]; 2]) -> EffectiveModel {
    let lat = Lattice::standard(2);
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let inv = [[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]];
    let form = move |m: [[f64; 2]; 2], v: &[f64]| {
        m[0][0] * v[0] * v[0] + (m[0][1] + m[1][0]) * v[0] * v[1] + m[1][1] * v[1] * v[1]
    };
    EffectiveModel::from_functions(
        Family::Quadratic,
        4.0,
        1.0,
        lat,
        lat,
        move |p| form(a, p),
        move |q| -form(inv, q) / 4.0,
        move |q| vec![(inv[0][0] * q[0] + inv[0][1] * q[1]) / 2.0, (inv[1][0] * q[0] + inv[1][1] * q[1]) / 2.0],
    )
}

fn experiment(spec: LagrangianSpec, datum: BoundaryDatum, scales: Vec<u32>, samples: usize) -> DirichletExperiment {
    DirichletExperiment { spec, side: 1, datum, scales, samples, max_nodes: 1_000_000 }
}

#[test]
fn dirichlet_constant_coefficients_have_no_error() {
    let a = [[1.0, 0.0], [0.0, 4.0]];
    let spec = LagrangianSpec::constant(vec![vec![1.0, 0.0], vec![0.0, 4.0]], 4.0);
    for datum in [
        BoundaryDatum::Affine { p: vec![1.0, -0.5] },
        BoundaryDatum::Quadratic { p: vec![0.5, 0.25], c: 1.0 },
        BoundaryDatum::Sinusoidal { p: vec![0.25, 0.0], amplitude: 0.05, wavenumber: 1.0 },
    ] {
        let rep = dirichlet_error(&experiment(spec.clone(), datum, vec![1, 2], 2), &exact_model(a), 0.25, 1).unwrap();
        for r in &rep.rows {
            assert!(r.l2_error < 1e-16 && r.linf_error < 1e-9 && r.energy_gap < 1e-9, "{r:?}");
        }
        assert!(rep.rate.is_none());
    }
}

#[test]
fn dirichlet_laminate_affine_error_halves() {
    let mut spec = LagrangianSpec::two_phase(2, 1.0, 4.0, 4.0);
    spec.layout = Layout::Laminate { axis: 0, random_offset: true };
    let model = exact_model([[1.6, 0.0], [0.0, 2.5]]);
    let rep = dirichlet_error(&experiment(spec, BoundaryDatum::Affine { p: vec![1.0, 0.5] }, vec![1, 2, 3], 4), &model, 0.25, 7)
        .unwrap();
    let l2: Vec<f64> = rep.scales.iter().map(|s| s.l2.mean).collect();
    assert!(l2.windows(2).all(|w| w[1] < w[0]), "{l2:?}");
    assert!(l2.windows(2).any(|w| w[1] <= 0.5 * w[0]), "{l2:?}");
    assert!(rep.min_het_sandwich >= -1e-9 && rep.min_hom_sandwich >= -1e-9);
    let mut buf = Vec::new();
    rep.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("epsilon,sample,l2_error,linf_error,energy_gap\n"));
    assert_eq!(text.lines().count(), 1 + 12);
}

#[test]
fn dirichlet_range_and_validation() {
    let spec = LagrangianSpec::two_phase(2, 1.0, 4.0, 4.0);
    let model = exact_model([[2.0, 0.0], [0.0, 2.0]]);
    let wide = experiment(spec.clone(), BoundaryDatum::Quadratic { p: vec![1.5, 0.0], c: 1.0 }, vec![1], 2);
    assert!(matches!(dirichlet_error(&wide, &model, 0.25, 0), Err(Error::Range(_))));
    let bad = experiment(spec.clone(), BoundaryDatum::Affine { p: vec![1.0] }, vec![1], 2);
    assert!(matches!(dirichlet_error(&bad, &model, 0.25, 0), Err(Error::Validation(_))));
    let mut big = experiment(spec, BoundaryDatum::Affine { p: vec![1.0, 0.0] }, vec![1, 6], 2);
    big.max_nodes = 10_000;
    assert!(matches!(dirichlet_error(&big, &model, 0.25, 0), Err(Error::Budget { completed, .. }) if completed == vec![1]));
}

fn grid(half: f64, h: f64) -> Grid {
    Grid::new(BoxDomain::centered(2, half), h).unwrap()
}

#[test]
fn coarsen_preserves_affine() {
    let u = GridFunction::affine(grid(6.5, 0.25), Role::U, &[0.7, -1.3]);
    let v = BoxDomain::centered(2, 3.5);
    let xi = coarsen(&u, 1, &v).unwrap();
    for i in 0..xi.grid.n_nodes() {
        let x = xi.grid.node_coord(i);
        assert!((xi.values[i] - (0.7 * x[0] - 1.3 * x[1])).abs() < 1e-12);
    }
}

#[test]
fn coarsen_cancels_matched_period() {
    let u = GridFunction::from_fn(grid(13.5, 0.25), Role::U, |x| 9.0 * (2.0 * std::f64::consts::PI * x[0] / 9.0).sin());
    let xi = coarsen(&u, 2, &BoxDomain::centered(2, 4.5)).unwrap();
    assert!(xi.max_abs() < 1e-12, "{}", xi.max_abs());
}

#[test]
fn coarsen_jensen_on_minimizer() {
    let spec = LagrangianSpec::two_phase(2, 1.0, 4.0, 4.0);
    let g = grid(6.5, 0.25);
    let field = sample_field(&spec, 3, g.domain).unwrap();
    let e = DiscreteEnergy::new(&field, g, vec![2.0, 0.0], Boundary::Free);
    let u = minimize(&e, 1e-10).unwrap().solution;
    let v = BoxDomain::centered(2, 3.5);
    let xi = coarsen(&u, 1, &v).unwrap();
    let norm = |f: &GridFunction| (f.dirichlet_energy() * f.grid.domain.volume()).sqrt();
    assert!(norm(&xi) <= norm(&u) * (1.0 + 0.25), "{} vs {}", norm(&xi), norm(&u));
    assert!(matches!(coarsen(&u, 1, &BoxDomain::centered(2, 4.0)), Err(Error::Geometry(_))));
}

fn periodic_81() -> PeriodicGrid {
    PeriodicGrid::new(2, 81, 1.0 / 9.0)
}

#[test]
fn helmholtz_constant_field() {
    let g = periodic_81();
    let f = vec![vec![0.3; g.len()], vec![-1.2; g.len()]];
    let dec = helmholtz_project(&f, &g).unwrap();
    assert!((dec.fbar[0] - 0.3).abs() < 1e-15 && (dec.fbar[1] + 1.2).abs() < 1e-15);
    assert!(dec.w.iter().all(|v| v.abs() < 1e-12));
    assert!(dec.s.iter().flatten().flatten().all(|v| v.abs() < 1e-12));
}

#[test]
fn helmholtz_gradient_field() {
    let g = periodic_81();
    let two_pi = 2.0 * std::f64::consts::PI;
    let pot: Vec<f64> = (0..g.len())
        .map(|i| {
            let m = g.multi(i);
            (two_pi * m[0] as f64 / 81.0).sin() * (two_pi * 2.0 * m[1] as f64 / 81.0).cos()
        })
        .collect();
    let f = vec![g.forward_diff(&pot, 0), g.forward_diff(&pot, 1)];
    let dec = helmholtz_project(&f, &g).unwrap();
    assert!(dec.fbar.iter().all(|v| v.abs() < 1e-12));
    let shift = dec.w[0] - pot[0];
    assert!(dec.w.iter().zip(&pot).all(|(a, b)| (a - b - shift).abs() < 1e-9));
    assert!(dec.s.iter().flatten().flatten().all(|v| v.abs() < 1e-9));
}

#[test]
fn helmholtz_random_field_reconstructs() {
    let g = periodic_81();
    let mut state = 12345u64;
    let mut next = || {
        state = homog_core::field::mix64(state.wrapping_add(0x9e37_79b9_7f4a_7c15));
        homog_core::field::unit_uniform(state) * 2.0 - 1.0
    };
    // cellwise constant on 9×9 blocks of the lattice
    let blocks: Vec<[f64; 2]> = (0..81).map(|_| [next(), next()]).collect();
    let f: Vec<Vec<f64>> = (0..2)
        .map(|c| {
            (0..g.len())
                .map(|i| {
                    let m = g.multi(i);
                    blocks[m[0] / 9 + 9 * (m[1] / 9)][c]
                })
                .collect()
        })
        .collect();
    let dec = helmholtz_project(&f, &g).unwrap();
    assert!(dec.residual <= 1e-9, "{}", dec.residual);
    assert_eq!(dec.skew_defect, 0.0);
    assert!(dec.s[0][0].iter().all(|v| *v == 0.0));
}

#[test]
fn patching_constant_coefficients_is_exact() {
    let spec = LagrangianSpec::constant(scaled_identity(2, 1.0), 1.0);
    let field = sample_field(&spec, 0, BoxDomain::centered(2, 4.5)).unwrap();
    let req = PatchRequest { n: 1, q: vec![2.0, 0.0], pbar: vec![1.0, 0.0], h: 0.25, delta: 1.0 / 14.0 };
    let (rep, art) = patch_candidate(&field, &req).unwrap();
    assert!(rep.gap.abs() < 1e-9 && rep.admissibility.abs() < 1e-9, "{rep:?}");
    assert!(art.psi_defect < 1e-12);
    assert!(art.decomposition.residual < 1e-9);
    assert_eq!(art.anchors.len(), 1);
    let g = art.v.grid;
    assert!((0..g.n_nodes()).filter(|&i| g.is_boundary(i)).all(|i| art.v.values[i] == 0.0));
}

#[test]
fn patching_checkerboard_is_admissible() {
    let spec = LagrangianSpec::two_phase(2, 1.0, 4.0, 4.0);
    let req = PatchRequest { n: 1, q: vec![2.0, 0.0], pbar: vec![0.62, 0.0], h: 0.25, delta: 1.0 / 14.0 };
    for seed in 0..3 {
        let field = sample_field(&spec, seed, BoxDomain::centered(2, 4.5)).unwrap();
        let (rep, art) = patch_candidate(&field, &req).unwrap();
        assert!(rep.admissibility >= -1e-8, "{rep:?}");
        assert!(art.decomposition.residual < 1e-9 && art.decomposition.skew_defect == 0.0);
        assert!(art.zeta.values.iter().all(|v| (-1e-15..=1.0 + 1e-12).contains(v)));
    }
}

#[test]
fn linfty_examples() {
    let g = grid(4.0, 0.5);
    let zero = GridFunction::zeros(g, Role::Generic);
    assert_eq!(linfty_interpolate(&zero, &[0.0, 0.0], 3.0, 0.5).unwrap().bound, 0.0);
    let c = GridFunction::from_fn(g, Role::Generic, |_| 0.7);
    let b = linfty_interpolate(&c, &[0.0, 0.0], 3.0, 0.5).unwrap();
    assert!((b.sup - 0.7).abs() < 1e-15 && b.sup <= b.bound * (1.0 + 1e-6));
    assert!(linfty_interpolate(&c, &[100.0, 0.0], 1.0, 0.5).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn linfty_bound_dominates_smooth_functions(a in -2.0f64..2.0, b in -2.0f64..2.0, k in 0.1f64..2.0, gamma in 0.2f64..1.0) {
        let g = grid(4.0, 0.5);
        let u = GridFunction::from_fn(g, Role::Generic, |x| a * (k * x[0]).sin() + b * (k * x[1]).cos());
        let r = linfty_interpolate(&u, &[0.5, -0.5], 3.0, gamma).unwrap();
        prop_assert!(r.sup <= r.bound * (1.0 + 1e-6));
    }
}
