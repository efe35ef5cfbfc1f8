use nslame::specfun::{EllipticModulus, ModelParams};
use nslame::transforms::{pipeline, PipelineRequest, QuadratureSpec, TransformScheme};
use nslame::verify::*;
use nslame::{Error, C64};
use proptest::prelude::*;
use std::f64::consts::PI;

#[test]
fn grid_layout() {
    let g = verification_grid(17);
    assert!((g[0] - (-PI + 2.0 * PI * GRID_OFFSET / 17.0)).abs() < 1e-15);
    assert!(g.windows(2).all(|w| (w[1] - w[0] - 2.0 * PI / 17.0).abs() < 1e-14));
}

#[test]
fn slopes_of_known_power_laws() {
    let qs: [f64; 4] = [0.1, 0.05, 0.025, 0.0125];
    let e4: Vec<f64> = qs.iter().map(|q| q.powi(4)).collect();
    assert!((convergence_slope(&e4, &qs).unwrap() - 4.0).abs() < 1e-12);
    let e6: Vec<f64> = qs.iter().map(|q| 3.0 * q.powi(6) * (1.0 + q)).collect();
    let s = convergence_slope(&e6, &qs).unwrap();
    assert!((5.9..6.2).contains(&s), "{s}");
    assert!(matches!(convergence_slope(&[1.0, 0.0, 1.0], &[0.1, 0.2, 0.3]), Err(Error::Domain(_))));
    assert!(convergence_slope(&e4[..2], &qs[..2]).is_err());
}

#[test]
fn projection_examples() {
    // (1, 1, 1): the right-hand side is the constant 1.
    assert!((projection_q0_target(1, 1.0, 1.0, 0.7) - 1.0).abs() < 1e-15);
    // (3, 2, 2): (2)_3 (6)_1 / (3! (4)_1) · C_1^{(4)}(cos x) = 48 cos x.
    assert!((projection_q0_target(3, 2.0, 2.0, 0.7) - 48.0 * 0.7f64.cos()).abs() < 1e-12);
    // g = 0 with the cos(ny) seed: ½ C_{n-Λ}^{(Λ)}(cos x).
    assert!((projection_q0_target(2, 0.0, 2.0, 0.7) - 0.5).abs() < 1e-15);
    for &(n, g, k) in &[(1, 1.0, 1.0), (3, 2.0, 2.0), (2, 0.5, 1.0), (4, 0.0, 2.0)] {
        let d = check_projection_q0(n, g, k).unwrap();
        assert!(d < 1e-10, "({n}, {g}, {k}): {d:e}");
    }
    assert!(check_projection_q0(1, 1.0, 2.0).is_err());
    assert!(check_projection_q0(2, 1.0, 0.5).is_err());
}

#[test]
fn theta_identities_hold() {
    for tau in [C64::new(0.0, 1.0), C64::new(0.25, 0.8)] {
        let m = EllipticModulus::new(tau).unwrap();
        let r = check_theta_identities(&m, 6, 11).unwrap();
        assert!(!r.identities.is_empty());
        assert!(r.passed(), "{:?}", r.identities.iter().filter(|d| d.max_deviation >= d.tolerance).collect::<Vec<_>>());
    }
}

#[test]
fn big_theta_vanishes_at_unity() {
    let m = EllipticModulus::new(C64::new(0.0, 1.0)).unwrap();
    assert_eq!(big_theta1(C64::new(1.0, 0.0), &m), C64::new(0.0, 0.0));
    // Θ₁(1/ξ) = -Θ₁(ξ)/ξ
    let xi = C64::new(0.6, 0.3);
    let lhs = big_theta1(1.0 / xi, &m);
    assert!((lhs + big_theta1(xi, &m) / xi).norm() < 1e-13);
}

#[test]
fn free_waves_have_zero_residual() {
    // g = 0: ψ = cos(nx) is τ-independent with E = n².
    let m = EllipticModulus::new(C64::new(0.0, 1.0)).unwrap();
    let n = 3;
    let psi = |_: &EllipticModulus, xs: &[f64]| Ok(xs.iter().map(|x| C64::new((n as f64 * x).cos(), 0.0)).collect());
    let e = |_: &EllipticModulus| C64::new((n * n) as f64, 0.0);
    let grid = verification_grid(17);
    let r = pde_residual(&psi, &e, ModelParams::new(n, 0.0, 1.0), &m, &grid, 1e-3, 1e-3, 1e-5).unwrap();
    assert!(r.passed, "{:e}", r.max_residual);
    // The wrong energy is caught.
    let bad = |_: &EllipticModulus| C64::new((n * n) as f64 + 0.01, 0.0);
    let r = pde_residual(&psi, &bad, ModelParams::new(n, 0.0, 1.0), &m, &grid, 1e-3, 1e-3, 1e-5).unwrap();
    assert!(!r.passed && (r.max_residual - 0.01).abs() < 1e-5);
}

#[test]
fn symmetry_of_even_periodic_functions() {
    let grid = verification_grid(9);
    assert!(symmetry_deviation(&|x| Ok(C64::new(x.cos().powi(3), 0.0)), &grid).unwrap() < 1e-15);
    assert!(symmetry_deviation(&|x| Ok(C64::new(x.sin() + 2.0, 0.0)), &grid).unwrap() > 0.1);
}

#[test]
fn trig_limit_of_the_zero_order_series() {
    let s = nslame::qpert::tilde_to_plain(
        &nslame::qpert::solve_series(ModelParams::new(2, 1.5, 1.0), 2, nslame::qpert::SeriesMode::Nonstationary).unwrap(),
        nslame::qpert::Direction::ToPlain,
    )
    .unwrap();
    let d = check_trig_limit(TrigSubject::Series(&s), 1e-4).unwrap();
    assert!(d < 1e-6, "{d:e}");
    assert!(check_trig_limit(TrigSubject::Series(&s), 0.1).is_err());
    assert!((trig_reference(3, 0.0, 0.4) - 1.2f64.cos()).abs() < 1e-15);
}

#[test]
fn l2_bound_for_a_single_step() {
    let m = EllipticModulus::from_real_nome(0.1).unwrap();
    let req = PipelineRequest {
        numb: 1,
        kappa: 1.0,
        g0: 1.0,
        p: 1,
        n: 2,
        scheme: TransformScheme::FrakK,
        quad: QuadratureSpec::gauss_jacobi(32),
    };
    let bounds = pipeline_l2_bounds(&req, &m).unwrap();
    assert_eq!(bounds.len(), 1);
    assert!(bounds[0].holds() && bounds[0].lhs > 0.0, "{:?}", bounds[0]);
    assert!(pipeline(&req, &m).is_ok());
}

#[test]
fn check_report_schema() {
    let r = CheckReport::new("projection", serde_json::json!({"n": 1}), 2e-11, 1e-10, 7);
    assert!(r.passed);
    let v = serde_json::to_value(&r).unwrap();
    for key in ["check", "params", "max_deviation", "tolerance", "passed", "seed"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    assert!(!CheckReport::new("x", serde_json::json!({}), f64::NAN, 1.0, 0).passed);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn slope_recovers_exponent(p in 1.0f64..8.0, c in 0.1f64..10.0) {
        let qs: [f64; 3] = [0.2, 0.1, 0.05];
        let e: Vec<f64> = qs.iter().map(|q| c * q.powf(p)).collect();
        prop_assert!((convergence_slope(&e, &qs).unwrap() - p).abs() < 1e-10);
    }

    #[test]
    fn kernel_samples_are_reproducible(seed in 0u64..500) {
        let m = EllipticModulus::new(C64::new(0.0, 1.0)).unwrap();
        let kind = nslame::kernels::KernelKind::Mu(2);
        let a = sample_kernel_points(kind, 1.0, 1.0, &m, 4, seed);
        let b = sample_kernel_points(kind, 1.0, 1.0, &m, 4, seed);
        prop_assert_eq!(a.len(), 4);
        for (p, r) in a.iter().zip(&b) {
            prop_assert_eq!((p.x, p.y), (r.x, r.y));
        }
    }
}
