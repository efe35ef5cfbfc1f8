use nslame::qpert::{solve_series_with, tilde_to_plain, Direction, SeriesMode, SolveOptions};
use nslame::specfun::{gegenbauer, EllipticModulus, ModelParams};
use nslame::transforms::*;
use nslame::verify::{pipeline_residual, verification_grid};
use nslame::{Error, C64};
use proptest::prelude::*;
use std::f64::consts::PI;

fn k_req(kappa: f64, g0: f64, p: u8, numb: usize, n: i64, m: &EllipticModulus) -> PipelineRequest {
    PipelineRequest { numb, kappa, g0, p, n, scheme: TransformScheme::K, quad: QuadratureSpec::default_for(m) }
}

fn frak_req(kappa: f64, numb: usize, n: i64) -> PipelineRequest {
    PipelineRequest {
        numb,
        kappa,
        g0: 1.0,
        p: 1,
        n,
        scheme: TransformScheme::FrakK,
        quad: QuadratureSpec::gauss_jacobi(32),
    }
}

#[test]
fn jacobi_weight_integrals() {
    // (1/π)∫(1-z²)^{g-1/2} dz = Γ(g+1/2)/(√π Γ(g+1)): 2/π at g = 1/2, 1/2 at g = 1.
    let one = |_: f64| Ok(C64::new(1.0, 0.0));
    assert!((quad_jacobi(&one, 0.5, 8).unwrap().re - 2.0 / PI).abs() < 1e-14);
    assert!((quad_jacobi(&one, 1.0, 8).unwrap().re - 0.5).abs() < 1e-14);
    // Orthogonality of C_2^{(g)} and C_4^{(g)}.
    let g = 1.7;
    let f = |z: f64| Ok(gegenbauer(2, g, C64::new(z, 0.0)) * gegenbauer(4, g, C64::new(z, 0.0)));
    assert!(quad_jacobi(&f, g, 12).unwrap().norm() < 1e-14);
    assert!(quad_jacobi(&one, 0.0, 8).is_err());
}

#[test]
fn shifted_trapezoid_is_contour_independent() {
    let m = EllipticModulus::new(C64::new(0.0, 1.0)).unwrap();
    // ∫dy/2π e^{2iy}/(1 - 0.3 e^{2iy})... analytic in the strip: only the constant term survives.
    let f = |y: C64| Ok((C64::i() * 2.0 * y).exp() * (C64::i() * 2.0 * y).exp() + 0.25);
    for eps in [0.3, 1.0, 2.0] {
        let spec = QuadratureSpec { scheme: QuadScheme::TrapezoidShifted, n: 64, epsilon: eps, refine: false };
        assert!((quad_periodic(&f, &spec).unwrap() - 0.25).norm() < 1e-13);
    }
    let bad = QuadratureSpec { scheme: QuadScheme::TrapezoidShifted, n: 64, epsilon: 4.0, refine: false };
    assert!(bad.validate_contour(&m).is_err());
}

#[test]
fn normalization_constants() {
    assert_eq!(k_normalization(3, 0.0, 1.0).unwrap(), 0.5);
    assert_eq!(k_normalization(3, 0.0, 2.0).unwrap(), 0.125);
    // g = 1, Λ = 1, n = 3: -4^{-2} 3! / ((1)_1 (3)_2) = -6/(16·12)
    assert!((k_normalization(3, 1.0, 1.0).unwrap() + 6.0 / 192.0).abs() < 1e-16);
    assert!(matches!(k_normalization(0, 1.0, 1.0), Err(Error::DegreeUnderflow { .. })));
    // The literal single-step constant differs by 4^{2(g+Λ)} in magnitude.
    let (a, b) = (k_normalization(3, 1.0, 1.0).unwrap(), k_normalization_literal(3, 1.0, 1.0).unwrap());
    assert!((b / a.abs() - 256.0).abs() < 1e-12);
    // ℳ = 1 at g = 0; at (n, g, Λ) = (1, 1, 1): (1)_1 (2)_1 / (1! (3)_1 𝔥_1) with 𝔥_1 = 1/2.
    assert_eq!(frak_normalization(2, 0.0, 1.0).unwrap(), 1.0);
    assert!((frak_normalization(1, 1.0, 1.0).unwrap() - 4.0 / 3.0).abs() < 1e-14);
}

#[test]
fn seeds_solve_the_free_heat_equation() {
    let m = EllipticModulus::new(C64::new(0.0, 1.0)).unwrap();
    let s0 = seed(3, 0, 1.0, &m).unwrap();
    for y in [0.2, 1.1, 2.7] {
        assert!((s0(C64::new(y, 0.0)).unwrap() - (3.0 * y).cos()).norm() < 1e-15);
    }
    // p = 1: |sin y| U_n(cos y) G^{-3/Λ} on the real line.
    let s1 = seed(2, 1, 1.0, &m).unwrap();
    for y in [0.4f64, -1.3, 2.2] {
        let want = (3.0 * y).sin() * y.signum() / m.big_g.re.powi(3);
        assert!((s1(C64::new(y, 0.0)).unwrap() - want).norm() < 1e-13);
    }
    assert!(seed(-1, 0, 1.0, &m).is_err());
    assert!(seed(1, 1, 0.0, &m).is_err());
}

#[test]
fn request_validation() {
    let m = EllipticModulus::new(C64::new(0.0, 1.2)).unwrap();
    let under = k_req(2.0, 0.0, 0, 2, 3, &m);
    assert!(matches!(validate_request(&under, &m), Err(Error::DegreeUnderflow { .. })));
    let frac = k_req(0.5, 0.0, 0, 1, 3, &m);
    assert!(matches!(validate_request(&frac, &m), Err(Error::Domain(_))));
    let mismatch = PipelineRequest { g0: 0.0, ..k_req(1.0, 0.0, 1, 1, 3, &m) };
    assert!(matches!(validate_request(&mismatch, &m), Err(Error::Domain(_))));
    let tiny = EllipticModulus::from_real_nome(1e-4).unwrap();
    assert!(matches!(validate_request(&frak_req(1.0, 2, 2), &tiny), Err(Error::Precision(_))));
    let tilted = EllipticModulus::new(C64::new(0.2, 1.0)).unwrap();
    assert!(matches!(validate_request(&frak_req(0.5, 2, 1), &tilted), Err(Error::Branch(_))));
    assert!(validate_request(&frak_req(1.0, 2, 1), &tilted).is_ok());
}

#[test]
fn pipelines_are_deterministic() {
    let m = EllipticModulus::new(C64::new(0.0, 1.2)).unwrap();
    let grid = verification_grid(17);
    let a = pipeline(&k_req(1.0, 0.0, 0, 2, 3, &m), &m).unwrap().sample(&grid).unwrap();
    let b = pipeline(&k_req(1.0, 0.0, 0, 2, 3, &m), &m).unwrap().sample(&grid).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(a.to_csv(), b.to_csv());
}

#[test]
fn provenance_records_every_step() {
    let m = EllipticModulus::new(C64::new(0.0, 1.2)).unwrap();
    let pl = pipeline(&k_req(1.0, 1.0, 1, 2, 3, &m), &m).unwrap();
    assert_eq!(pl.steps.len(), 2);
    assert_eq!((pl.params.n, pl.params.g), (1, 3.0));
    let eps: Vec<f64> = pl.steps.iter().map(|s| s.epsilon.unwrap()).collect();
    let top = PI * m.tau.im;
    assert!((eps[0] - 0.4 * top).abs() < 1e-14 && (eps[1] - 0.35 * top).abs() < 1e-14);
    for s in &pl.steps {
        assert!(s.drift.unwrap() < 1e-10);
        assert_eq!(s.g_out - s.g_in, 1.0);
        assert_eq!(s.n_in - s.n_out, 1);
    }
}

#[test]
fn sampled_output_files() {
    let m = EllipticModulus::from_real_nome(0.1).unwrap();
    let s = pipeline(&frak_req(1.0, 1, 1), &m).unwrap().sample(&verification_grid(5)).unwrap();
    let csv = s.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("x,psi_re,psi_im"));
    assert_eq!(lines.count(), 5);
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("out");
    s.write(&stem).unwrap();
    let side: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json")).unwrap()).unwrap();
    for key in ["params", "E", "provenance"] {
        assert!(side.get(key).is_some(), "sidecar lacks {key}");
    }
    assert_eq!(std::fs::read_to_string(stem.with_extension("csv")).unwrap(), csv);
}

#[test]
fn schemes_agree_on_a_single_step() {
    let m = EllipticModulus::from_real_nome(0.1).unwrap();
    let grid = verification_grid(9);
    let gj = pipeline(&frak_req(1.0, 1, 2), &m).unwrap();
    let tr_req = PipelineRequest {
        quad: QuadratureSpec { scheme: QuadScheme::TrapezoidShifted, n: 64, epsilon: 0.0, refine: true },
        ..frak_req(1.0, 1, 2)
    };
    let tr = pipeline(&tr_req, &m).unwrap();
    let a = gj.eval_psi_many(&grid).unwrap();
    let b = tr.eval_psi_many(&grid).unwrap();
    let scale = a.iter().map(|v| v.norm()).fold(0.0, f64::max);
    for (a, b) in a.iter().zip(&b) {
        assert!((a - b).norm() < 1e-10 * scale);
    }
}

/// The contour-form transform of the irregular seed against the series solution at
/// `(n, g, Λ) = (0, 2, 1)`. The map sends the `g = 0` solution of degree 2 to degree 0 at
/// `g = 2`; at `(ℓ, m) = (3, 2)` the recursion of the target is resonant, so the image is
/// the pinned series plus a free multiple of the homogeneous `q⁶ ψ_{2,2}` component. Both
/// coefficients are fitted on two points and the rest of the grid is predicted.
#[test]
fn irregular_transform_matches_series_up_to_the_resonant_mode() {
    let q = 0.05;
    let l = 5;
    let m = EllipticModulus::from_real_nome(q).unwrap();
    let q2 = m.q2();
    let opts = SolveOptions { allow_resonance: true };
    let plain = |n: i64, g: f64, l: usize| {
        let s = solve_series_with(ModelParams::new(n, g, 1.0), l, SeriesMode::Nonstationary, opts).unwrap();
        tilde_to_plain(&s, Direction::ToPlain).unwrap().polynomials().unwrap()
    };
    let seed_p = plain(2, 0.0, l);
    let out = plain(0, 2.0, l);
    let hom = plain(2, 2.0, l - 3);
    let p_irr = |xi: C64| seed_p.eval(xi, q2);
    let xs = [0.4, 1.3, 2.2, 0.9, 1.7, 2.8, 0.1];
    let rows: Vec<(f64, f64, f64)> = xs
        .iter()
        .map(|&x| {
            let v = transform_irregular(&p_irr, 1.0, 1.0, x, 0.05, 64, &m).unwrap().re;
            let z = C64::new(x.cos(), 0.0);
            (v, out.eval(z, q2).re, (q2.powu(3) * hom.eval(z, q2)).re)
        })
        .collect();
    let ((v0, o0, h0), (v1, o1, h1)) = (rows[0], rows[1]);
    let det = o0 * h1 - o1 * h0;
    let a = (v0 * h1 - v1 * h0) / det;
    let b = (o0 * v1 - o1 * v0) / det;
    let scale = rows.iter().map(|r| r.0.abs()).fold(0.0, f64::max);
    let dev = rows.iter().map(|(v, o, h)| (v - a * o - b * h).abs()).fold(0.0, f64::max) / scale;
    assert!(dev < 1e-9, "two-parameter fit deviation {dev:e}");
    assert!(b.abs() > 1e-3 * a.abs(), "the resonant component is present (b/a = {})", b / a);
    // The contour radius is immaterial.
    for &x in &[0.4, 2.2] {
        let r1 = transform_irregular(&p_irr, 1.0, 1.0, x, 0.05, 64, &m).unwrap();
        let r2 = transform_irregular(&p_irr, 1.0, 1.0, x, 0.1, 64, &m).unwrap();
        assert!((r1 - r2).norm() < 1e-12 * r1.norm());
    }
    assert!(transform_irregular(&p_irr, 1.5, 1.0, 0.4, 0.05, 64, &m).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn single_frak_step_solves_the_equation(kappa in 0.3f64..1.6, n in 0i64..3) {
        let m = EllipticModulus::from_real_nome(0.1).unwrap();
        let pl = pipeline(&frak_req(kappa, 1, n), &m).unwrap();
        let r = pipeline_residual(&pl, &verification_grid(9), 1e-3, 1e-3, 1e-5).unwrap();
        prop_assert!(r.passed, "residual {:e}", r.max_residual);
    }
}
