use nslame::kernels::*;
use nslame::specfun::{theta, EllipticModulus, ModelParams};
use nslame::verify::{check_kernel_identity, sample_kernel_points, KERNEL_SAMPLE_MARGIN};
use nslame::{Error, C64};
use proptest::prelude::*;
use std::f64::consts::PI;

fn point(x: C64, y: C64, g: f64, kappa: f64, m: &EllipticModulus) -> KernelPoint {
    KernelPoint { x, y, params: ModelParams::new(0, g, kappa), modulus: *m }
}

#[test]
fn kernel_index_range() {
    assert_eq!(KernelKind::from_index(0).unwrap(), KernelKind::CalK);
    assert_eq!(KernelKind::from_index(3).unwrap(), KernelKind::Mu(3));
    assert!(matches!(KernelKind::from_index(5), Err(Error::Domain(_))));
    assert!(matches!(KernelKind::from_index(-1), Err(Error::Domain(_))));
}

#[test]
fn k4_is_the_explicit_theta_quotient() {
    let m = EllipticModulus::new(C64::new(0.0, 0.9)).unwrap();
    let (g, kappa) = (2.0, 1.0);
    let (x, y) = (C64::new(0.8, 0.0), C64::new(-1.7, 0.0));
    let s = 2.0 * g + kappa;
    let t1 = |z: C64| theta(1, z, &m).unwrap();
    let t4 = |z: C64| theta(4, z, &m).unwrap();
    let want = t1(x).powf(g + kappa) * (t1(y) * t1(y)).powf(0.5 * g) / (t4(0.5 * (x + y)) * t4(0.5 * (x - y))).powf(s);
    let got = kernel_k(4, &point(x, y, g, kappa, &m)).unwrap();
    assert!((got - want).norm() < 1e-13 * want.norm());
}

#[test]
fn real_kernels_are_even_in_both_arguments() {
    let m = EllipticModulus::new(C64::new(0.0, 1.1)).unwrap();
    for mu in [3u8, 4] {
        let f = |x: f64, y: f64| kernel_k(mu, &point(C64::new(x, 0.0), C64::new(y, 0.0), 1.3, 0.6, &m)).unwrap();
        for &(x, y) in &[(0.7, 1.9), (2.2, -0.4)] {
            assert!((f(x, y) - f(-x, y)).norm() < 1e-13 * f(x, y).norm());
            assert!((f(x, y) - f(x, -y)).norm() < 1e-13 * f(x, y).norm());
        }
    }
}

#[test]
fn denominator_zero_is_a_pole_error() {
    let m = EllipticModulus::new(C64::new(0.0, 1.0)).unwrap();
    // θ₁(½(x - y)) = 0 at x = y.
    let p = point(C64::new(0.9, 0.0), C64::new(0.9, 0.0), 1.0, 1.0, &m);
    assert!(matches!(kernel_k(1, &p), Err(Error::Pole(_))));
}

#[test]
fn analytic_region_edges() {
    let m = EllipticModulus::new(C64::new(0.0, 1.0)).unwrap();
    let t = PI;
    assert!(in_analytic_region(C64::new(0.3, 0.0), C64::new(0.1, 0.5 * t), &m));
    assert!(!in_analytic_region(C64::new(0.3, 0.0), C64::new(0.1, 0.0), &m));
    assert!(!in_analytic_region(C64::new(0.3, 0.4), C64::new(0.1, 0.3), &m));
    assert!(!in_analytic_region(C64::new(0.3, 0.0), C64::new(0.1, 2.0 * t), &m));
}

#[test]
fn samples_keep_clear_of_branch_points() {
    let m = EllipticModulus::new(C64::new(0.3, 1.1)).unwrap();
    for mu in 0..=4 {
        let kind = KernelKind::from_index(mu).unwrap();
        for p in sample_kernel_points(kind, 1.5, 0.7, &m, 50, 3) {
            let d = |t: f64| {
                let r = t.rem_euclid(PI);
                r.min(PI - r)
            };
            assert!(d(p.x.re) >= KERNEL_SAMPLE_MARGIN);
            if p.y.im == 0.0 {
                assert!(d(p.y.re) >= KERNEL_SAMPLE_MARGIN);
            } else if matches!(kind, KernelKind::CalK | KernelKind::Mu(1)) {
                assert!(in_analytic_region(p.x, p.y, &m));
            }
        }
    }
}

#[test]
fn identity_residual_is_fourth_order() {
    let m = EllipticModulus::new(C64::new(0.0, 0.8)).unwrap();
    let p = point(C64::new(1.1, 0.0), C64::new(0.4, 0.0), 1.5, 0.7, &m);
    let kind = KernelKind::Mu(4);
    // Steps large enough that truncation, not the eps/h² roundoff floor, dominates.
    let r1 = kernel_identity_residual(kind, &p, 2e-2, 2e-2).unwrap();
    let r2 = kernel_identity_residual(kind, &p, 1e-2, 1e-2).unwrap();
    let order = (r1 / r2).log2();
    assert!(order > 3.5, "observed order {order} ({r1:e} -> {r2:e})");
}

#[test]
fn wrong_constant_is_detected() {
    // The residual is taken on k/k(x,y), so a constant off by δ shows up as |δ|.
    let m = EllipticModulus::new(C64::new(0.0, 1.0)).unwrap();
    let p = point(C64::new(1.0, 0.0), C64::new(-0.6, 0.0), 1.2, 0.8, &m);
    let kind = KernelKind::Mu(3);
    let c = kind_constant(kind, 1.2, 0.8, &m).unwrap();
    assert!(kernel_identity_residual_with(kind, &p, 1e-3, 1e-3, c).unwrap() < 1e-6);
    let off = kernel_identity_residual_with(kind, &p, 1e-3, 1e-3, c + 1e-3).unwrap();
    assert!((off - 1e-3).abs() < 1e-6, "{off:e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn identity_holds_for_random_couplings(
        mu in 0i64..=4,
        g in 0.6f64..2.5,
        kappa in -0.5f64..2.0,
        ti in 0.7f64..1.5,
        seed in 0u64..1000,
    ) {
        prop_assume!(2.0 * g + kappa > 0.2);
        let m = EllipticModulus::new(C64::new(0.15, ti)).unwrap();
        let kind = KernelKind::from_index(mu).unwrap();
        let r = check_kernel_identity(kind, g, kappa, &m, 3, seed, 1e-3).unwrap();
        prop_assert!(r < 1e-6, "residual {r:e}");
    }
}
