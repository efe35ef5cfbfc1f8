//! Quadrature engines, the θ₁-kernel transform `K` (degree step `n → n-Λ`), the θ₄-kernel
//! transform `𝔎` (degree preserving), seeds, iterated pipelines and the irregular-seed
//! contour transform.
//!
//! Solutions are carried as their analytic part `P`, with `ψ = (θ₁(x)²)^{g/2} P(x)`. On the
//! real line `(θ₁²)^a` is `(sin²x)^a S(x)^{2a}` with `S = θ₁/sin`; on shifted contours it is
//! `θ₁^{2a}` continued from `(0, π)`, which needs `2a` to be an integer.

use crate::error::{Error, Result};
use crate::specfun::{
    gegenbauer, gegenbauer_norm, pochhammer_re, theta1, theta1_over_sin, theta4, EllipticModulus,
    ModelParams,
};
use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma, ln_gamma};
use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::Write as _;
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};

/// Point-count cap for the periodic trapezoid.
pub const TRAPEZOID_CAP: usize = 1 << 14;
/// Point-count cap for Gauss–Jacobi refinement.
pub const JACOBI_CAP: usize = 512;
const REFINE_TOL: f64 = 1e-12;
const DRIFT_FAIL: f64 = 1e-8;
/// Smallest admissible `|q|^{2n}` for the `q^{-n}`-normalised transform.
pub const PRECISION_BUDGET: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadScheme {
    TrapezoidShifted,
    GaussJacobi,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSpec {
    pub scheme: QuadScheme,
    #[serde(rename = "N")]
    pub n: usize,
    pub epsilon: f64,
    pub refine: bool,
}

impl QuadratureSpec {
    /// `N = 256`, refinement on, `ε = 0.4·πIm τ`.
    pub fn default_for(m: &EllipticModulus) -> Self {
        QuadratureSpec { scheme: QuadScheme::TrapezoidShifted, n: 256, epsilon: 0.4 * PI * m.tau.im, refine: true }
    }

    pub fn gauss_jacobi(n: usize) -> Self {
        QuadratureSpec { scheme: QuadScheme::GaussJacobi, n, epsilon: 0.0, refine: true }
    }

    /// Contour condition `0 < ε < πIm τ` for the shifted trapezoid.
    pub fn validate_contour(&self, m: &EllipticModulus) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Domain("quadrature needs N >= 1".into()));
        }
        let top = PI * m.tau.im;
        if !(self.epsilon > 0.0 && self.epsilon < top) {
            return Err(Error::Domain(format!("contour shift must satisfy 0 < epsilon < pi Im(tau) = {top}, got {}", self.epsilon)));
        }
        Ok(())
    }
}

fn trapezoid_sum(f: &(dyn Fn(C64) -> Result<C64> + Sync), eps: f64, n: usize, start: usize, step: usize) -> Result<C64> {
    (start..n)
        .step_by(step)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&k| f(C64::new(-PI + 2.0 * PI * k as f64 / n as f64, eps)))
        .collect::<Result<Vec<_>>>()
        .map(ordered_sum)
}

// Sequential summation after a parallel map: results do not depend on the thread schedule.
fn ordered_sum(v: Vec<C64>) -> C64 {
    v.into_iter().fold(C64::new(0.0, 0.0), |a, b| a + b)
}

/// `∫_{-π+iε}^{π+iε} dy/2π f(y)` by the uniform trapezoid; with `refine` the point count
/// doubles (reusing the previous nodes) until successive values agree to `1e-12`.
pub fn quad_periodic(f: &(dyn Fn(C64) -> Result<C64> + Sync), spec: &QuadratureSpec) -> Result<C64> {
    if spec.n == 0 {
        return Err(Error::Domain("quadrature needs N >= 1".into()));
    }
    let eps = if spec.scheme == QuadScheme::TrapezoidShifted { spec.epsilon } else { 0.0 };
    let mut n = spec.n;
    let mut sum = trapezoid_sum(f, eps, n, 0, 1)?;
    if !spec.refine {
        return Ok(sum / n as f64);
    }
    loop {
        let prev = sum / n as f64;
        // New nodes of the doubled rule are the odd ones.
        sum += trapezoid_sum(f, eps, 2 * n, 1, 2)?;
        n *= 2;
        let cur = sum / n as f64;
        let drift = (cur - prev).norm();
        if drift < REFINE_TOL * cur.norm().max(1.0) {
            return Ok(cur);
        }
        if n >= TRAPEZOID_CAP {
            if drift <= DRIFT_FAIL * cur.norm().max(1.0) {
                return Ok(cur);
            }
            return Err(Error::NonConvergence { drift, n });
        }
    }
}

type Rule = Arc<(Vec<f64>, Vec<f64>)>;

fn rule_cache() -> &'static Mutex<HashMap<(u64, usize), Rule>> {
    static CACHE: OnceLock<Mutex<HashMap<(u64, usize), Rule>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Nodes and weights of the `n`-point Gauss rule for `(1-z²)^{g-1/2}` on `(-1,1)`
/// (Golub–Welsch on the Gegenbauer Jacobi matrix). Needs `g > -1/2`.
pub fn gauss_jacobi_rule(g: f64, n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let r = gauss_jacobi_shared(g, n)?;
    Ok((r.0.clone(), r.1.clone()))
}

fn gauss_jacobi_shared(g: f64, n: usize) -> Result<Rule> {
    if !(g > -0.5) || !g.is_finite() {
        return Err(Error::Domain(format!("Gauss-Jacobi weight exponent g - 1/2 must exceed -1, got g = {g}")));
    }
    if n == 0 {
        return Err(Error::Domain("quadrature needs N >= 1".into()));
    }
    let key = (g.to_bits(), n);
    if let Some(r) = rule_cache().lock().expect("rule cache").get(&key) {
        return Ok(r.clone());
    }
    let mut j = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let kf = k as f64;
        let b = if k == 1 {
            1.0 / (2.0 * (1.0 + g))
        } else {
            kf * (kf + 2.0 * g - 1.0) / (4.0 * (kf + g) * (kf + g - 1.0))
        };
        j[(k, k - 1)] = b.sqrt();
        j[(k - 1, k)] = b.sqrt();
    }
    let mu0 = PI.sqrt() * (ln_gamma(g + 0.5) - ln_gamma(g + 1.0)).exp();
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], mu0 * eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let rule: Rule = Arc::new(pairs.into_iter().unzip());
    rule_cache().lock().expect("rule cache").insert(key, rule.clone());
    Ok(rule)
}

/// `∫ dy/2π (sin²y)^g F(cos y) = (1/π) ∫_{-1}^{1} (1-z²)^{g-1/2} F(z) dz` by the `n`-point
/// Gauss–Jacobi rule.
pub fn quad_jacobi(f: &(dyn Fn(f64) -> Result<C64> + Sync), g: f64, n: usize) -> Result<C64> {
    if !(g > 0.0) {
        return Err(Error::Domain(format!("quad_jacobi weight needs g > 0, got {g}")));
    }
    jacobi_sum(f, g, n)
}

fn jacobi_sum(f: &(dyn Fn(f64) -> Result<C64> + Sync), g: f64, n: usize) -> Result<C64> {
    let rule = gauss_jacobi_shared(g, n)?;
    let (z, w) = (&rule.0, &rule.1);
    let s = (0..n)
        .into_par_iter()
        .map(|k| Ok(w[k] * f(z[k])?))
        .collect::<Result<Vec<_>>>()
        .map(ordered_sum)?;
    Ok(s / PI)
}

fn jacobi_refined(f: &(dyn Fn(f64) -> Result<C64> + Sync), g: f64, spec: &QuadratureSpec) -> Result<C64> {
    let mut n = spec.n;
    let mut cur = jacobi_sum(f, g, n)?;
    if !spec.refine {
        return Ok(cur);
    }
    loop {
        let next = jacobi_sum(f, g, 2 * n)?;
        n *= 2;
        let drift = (next - cur).norm();
        cur = next;
        if drift < REFINE_TOL * cur.norm().max(1.0) {
            return Ok(cur);
        }
        if n >= JACOBI_CAP {
            if drift <= DRIFT_FAIL * cur.norm().max(1.0) {
                return Ok(cur);
            }
            return Err(Error::NonConvergence { drift, n });
        }
    }
}

/// `(θ₁(x)²)^a` under the branch conventions of this module.
pub fn theta1_sq_pow(x: C64, a: f64, m: &EllipticModulus) -> Result<C64> {
    if a == 0.0 {
        return Ok(C64::new(1.0, 0.0));
    }
    if x.im == 0.0 {
        let s2 = x.re.sin().powi(2);
        let big_s = theta1_over_sin(x, m);
        let sp = if (2.0 * a).fract() == 0.0 { big_s.powi((2.0 * a) as i32) } else { (2.0 * a * big_s.ln()).exp() };
        return Ok(s2.powf(a) * sp);
    }
    if (2.0 * a).fract() != 0.0 {
        return Err(Error::Branch(format!(
            "(theta1^2)^{a} off the real line needs an integer 2a; non-integer couplings have branch cuts on the real axis"
        )));
    }
    Ok(theta1(x, m).powi((2.0 * a) as i32))
}

fn int_pow(base: C64, e: f64) -> C64 {
    if e.fract() == 0.0 && e.abs() < 1e6 {
        base.powi(e as i32)
    } else {
        (e * base.ln()).exp()
    }
}

/// Analytic part of the seed: `cos(ny)` for `p = 0`, `U_n(cos y)/(S(y) G^{3/Λ})` for `p = 1`.
pub fn seed_analytic(n: i64, p: u8, kappa: f64, y: C64, m: &EllipticModulus) -> Result<C64> {
    if n < 0 {
        return Err(Error::Domain(format!("seed degree must be >= 0, got {n}")));
    }
    match p {
        0 => Ok((n as f64 * y).cos()),
        1 => {
            if kappa == 0.0 {
                return Err(Error::Domain("the p = 1 seed needs kappa != 0".into()));
            }
            let u = gegenbauer(n as usize, 1.0, y.cos());
            let gp = (3.0 / kappa * m.big_g.ln()).exp();
            Ok(u / (theta1_over_sin(y, m) * gp))
        }
        _ => Err(Error::Domain(format!("seed index p must be 0 or 1, got {p}"))),
    }
}

/// Seed solution `ψ(y)` at `g = p`: `cos(ny)`, or `|sin y| U_n(cos y)/G^{3/Λ}` on the real
/// line (`sin((n+1)y)/G^{3/Λ}` continued into the upper half strip).
pub fn seed(n: i64, p: u8, kappa: f64, m: &EllipticModulus) -> Result<impl Fn(C64) -> Result<C64> + Sync + Send> {
    let mm = *m;
    seed_analytic(n, p, kappa, C64::new(0.3, 0.0), m)?;
    Ok(move |y: C64| {
        let pa = seed_analytic(n, p, kappa, y, &mm)?;
        Ok(theta1_sq_pow(y, 0.5 * p as f64, &mm)? * pa)
    })
}

/// Canonical step constant for `K`: leading `q⁰` Gegenbauer coefficient of the output is 1.
pub fn k_normalization(n: i64, g: f64, kappa: f64) -> Result<f64> {
    if n < kappa as i64 {
        return Err(Error::DegreeUnderflow { n: n - kappa as i64, numb: 1, kappa });
    }
    let steps = (n - kappa as i64) as usize;
    if g == 0.0 {
        return Ok(2.0 * 4f64.powf(-kappa));
    }
    let gl = pochhammer_re(g, kappa as usize);
    let sl = pochhammer_re(2.0 * g + kappa, steps);
    if gl == 0.0 || sl == 0.0 {
        return Err(Error::Normalization(format!("vanishing Pochhammer factor at (n, g, kappa) = ({n}, {g}, {kappa})")));
    }
    let fact: f64 = (1..=n).map(|k| k as f64).product();
    let sign = if (g as i64) % 2 == 0 { 1.0 } else { -1.0 };
    Ok(sign * 4f64.powf(-(g + kappa)) * fact / (gl * sl))
}

/// Single-step constant `4^{g+Λ} n!/((2g+Λ)_{n-Λ}(g)_Λ)` in its literal (uncorrected) form.
pub fn k_normalization_literal(n: i64, g: f64, kappa: f64) -> Option<f64> {
    if n < kappa as i64 {
        return None;
    }
    let gl = pochhammer_re(g, kappa as usize);
    let sl = pochhammer_re(2.0 * g + kappa, (n - kappa as i64) as usize);
    if gl == 0.0 || sl == 0.0 {
        return None;
    }
    let fact: f64 = (1..=n).map(|k| k as f64).product();
    Some(4f64.powf(g + kappa) * fact / (sl * gl))
}

/// `ℳ_{n,g,Λ} = (g)_n (g+Λ)_n / (n! (2g+Λ)_n 𝔥_n)`; equals 1 at `g = 0` for the `cos(ny)`
/// normalisation of the `g → 0` limit.
pub fn frak_normalization(n: i64, g: f64, kappa: f64) -> Result<f64> {
    let nu = n as usize;
    let s = pochhammer_re(2.0 * g + kappa, nu);
    if s == 0.0 || !s.is_finite() {
        return Err(Error::Pole(format!("(2g+kappa)_n vanishes at (n, g, kappa) = ({n}, {g}, {kappa})")));
    }
    if g == 0.0 {
        return Ok(pochhammer_re(kappa, nu) / s);
    }
    let fact: f64 = (1..=nu).map(|k| k as f64).product();
    Ok(pochhammer_re(g, nu) * pochhammer_re(g + kappa, nu) / (fact * s * gegenbauer_norm(nu, g)?))
}

fn check_precision(n: i64, m: &EllipticModulus) -> Result<()> {
    let budget = m.q.norm().powi(2 * n as i32);
    if budget < PRECISION_BUDGET * (1.0 - 1e-9) {
        return Err(Error::Precision(format!(
            "|q|^(2n) = {budget:e} (n = {n}) is below {PRECISION_BUDGET:e}: the q^-n normalised integral would be cancellation noise"
        )));
    }
    Ok(())
}

fn calk_denominator(x: C64, y: C64, s: f64, m: &EllipticModulus) -> Result<C64> {
    let d = theta1(0.5 * (x + y), m) * theta1(0.5 * (x - y), m);
    if d.norm() < crate::specfun::POLE_GUARD {
        return Err(Error::Pole(format!("kernel pole at x = {x}, y = {y}")));
    }
    Ok(int_pow(d, -s))
}

/// `θ₄(½(x+y))θ₄(½(x-y))` as a polynomial in `(cos x, cos y)` per product factor.
pub fn theta4_pair_zform(z: f64, xi: f64, m: &EllipticModulus) -> C64 {
    let q = m.q;
    let q2 = q * q;
    let mut a = q;
    let mut acc = m.big_g * m.big_g;
    for _ in 0..m.series_terms {
        let a2 = a * a;
        let one = 1.0 + a2;
        acc *= one * one - 4.0 * a * one * z * xi + 2.0 * a2 * (2.0 * z * z + 2.0 * xi * xi - 2.0);
        a *= q2;
    }
    acc
}

fn frak_denominator(x: C64, y: C64, s: f64, m: &EllipticModulus) -> C64 {
    int_pow(theta4(0.5 * (x + y), m) * theta4(0.5 * (x - y), m), -s)
}

/// `(K_{g+Λ,g} ψ)(x)`, normalised so that the output's leading `q⁰` coefficient is
/// `C_{n-Λ}^{(g+Λ)}`. Needs integer `g` and nonzero integer `Λ`.
pub fn transform_k(
    psi: &(dyn Fn(C64) -> Result<C64> + Sync),
    params: ModelParams,
    spec: &QuadratureSpec,
    x: C64,
    m: &EllipticModulus,
) -> Result<C64> {
    params.validate_k()?;
    let QuadratureSpec { scheme, .. } = *spec;
    if scheme != QuadScheme::TrapezoidShifted {
        return Err(Error::Domain("transform K integrates over a shifted contour; use the trapezoid scheme".into()));
    }
    spec.validate_contour(m)?;
    if x.im.abs() >= spec.epsilon {
        return Err(Error::Domain(format!("|Im x| = {} must stay below the contour shift {}", x.im.abs(), spec.epsilon)));
    }
    let (g, kappa) = (params.g, params.kappa);
    let c = k_normalization(params.n, g, kappa)?;
    let s = 2.0 * g + kappa;
    let integrand = |y: C64| -> Result<C64> {
        Ok(theta1_sq_pow(y, 0.5 * g, m)? * psi(y)? * calk_denominator(x, y, s, m)?)
    };
    let integral = quad_periodic(&integrand, spec)?;
    Ok(theta1_sq_pow(x, 0.5 * (g + kappa), m)? * c * integral)
}

/// `(𝔎_{g+Λ,g} ψ)(x) = q^{-n} ℳ ∫_{-π}^{π} dy/2π k₄(x,y) ψ(y)` for real `x`.
pub fn transform_frak_k(
    psi: &(dyn Fn(C64) -> Result<C64> + Sync),
    params: ModelParams,
    spec: &QuadratureSpec,
    x: f64,
    m: &EllipticModulus,
) -> Result<C64> {
    params.validate_frak_k()?;
    if params.g.fract() != 0.0 && m.tau.re != 0.0 {
        return Err(Error::Branch("non-integer g needs purely imaginary tau for the theta4 transform".into()));
    }
    check_precision(params.n, m)?;
    let (g, kappa, n) = (params.g, params.kappa, params.n);
    let norm = m.q.powi(-(n as i32)) * frak_normalization(n, g, kappa)?;
    let s = 2.0 * g + kappa;
    let xc = C64::new(x, 0.0);
    let integral = match spec.scheme {
        QuadScheme::TrapezoidShifted => {
            let plain = QuadratureSpec { epsilon: 0.0, ..*spec };
            let f = |y: C64| -> Result<C64> {
                let yr = C64::new(y.re, 0.0);
                Ok(theta1_sq_pow(yr, 0.5 * g, m)? * psi(yr)? * frak_denominator(xc, yr, s, m))
            };
            quad_periodic(&f, &plain)?
        }
        QuadScheme::GaussJacobi => {
            let f = |z: f64| -> Result<C64> {
                let y = C64::new(z.acos(), 0.0);
                // (θ₁²)^{g/2} ψ = (sin²)^g S^{2g} P, and (sin²)^g is the weight.
                let sin_g = y.re.sin().powi(2).powf(0.5 * g);
                let dens = theta1_sq_pow(y, 0.5 * g, m)? * psi(y)? / (sin_g * sin_g);
                Ok(dens * int_pow(theta4_pair_zform(x.cos(), z, m), -s))
            };
            if spec.n == 0 {
                return Err(Error::Domain("quadrature needs N >= 1".into()));
            }
            jacobi_refined(&f, g, spec)?
        }
    };
    Ok(theta1_sq_pow(xc, 0.5 * (g + kappa), m)? * norm * integral)
}

/// Which transform a pipeline iterates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransformScheme {
    K,
    #[serde(rename = "frakK")]
    FrakK,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineRequest {
    pub numb: usize,
    pub kappa: f64,
    pub g0: f64,
    pub p: u8,
    /// Seed degree.
    pub n: i64,
    pub scheme: TransformScheme,
    pub quad: QuadratureSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub index: usize,
    pub g_in: f64,
    pub g_out: f64,
    pub n_in: i64,
    pub n_out: i64,
    pub epsilon: Option<f64>,
    #[serde(rename = "N")]
    pub n_points: usize,
    pub normalization: f64,
    /// Relative change of the probe values under the last doubling (`None` without refinement).
    pub drift: Option<f64>,
}

/// Canonical constant actually applied, next to the literal composite forms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeNorm {
    pub canonical: f64,
    pub literal_product: Option<f64>,
    pub literal_closed_form: Option<C64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub request: PipelineRequest,
    pub tau: C64,
    pub steps: Vec<StepInfo>,
    pub composite: CompositeNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledSolution {
    pub xs: Vec<f64>,
    pub values: Vec<C64>,
    pub params: ModelParams,
    #[serde(rename = "E")]
    pub energy: C64,
    pub provenance: Provenance,
}

impl SampledSolution {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,psi_re,psi_im\n");
        for (x, v) in self.xs.iter().zip(&self.values) {
            out.push_str(&format!("{x:.17e},{:.17e},{:.17e}\n", v.re, v.im));
        }
        out
    }

    /// Write `<stem>.csv` and the provenance sidecar `<stem>.json`.
    pub fn write(&self, stem: &Path) -> std::io::Result<()> {
        let mut f = std::fs::File::create(stem.with_extension("csv"))?;
        f.write_all(self.to_csv().as_bytes())?;
        let side = serde_json::json!({
            "params": self.params,
            "E": self.energy,
            "provenance": self.provenance,
        });
        std::fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&side)?)
    }
}

/// One tabulated stage: `P(x) = Σ_k dens_k / den(x, y_k)^s`.
#[derive(Debug, Clone)]
struct StageTable {
    scheme: TransformScheme,
    zform: bool,
    nodes: Vec<C64>,
    dens: Vec<C64>,
    s: f64,
    m: EllipticModulus,
}

impl StageTable {
    fn eval(&self, x: C64) -> Result<C64> {
        let mut acc = C64::new(0.0, 0.0);
        for (y, d) in self.nodes.iter().zip(&self.dens) {
            let k = match self.scheme {
                TransformScheme::K => calk_denominator(x, *y, self.s, &self.m)?,
                TransformScheme::FrakK if self.zform => int_pow(theta4_pair_zform(x.re.cos(), y.re.cos(), &self.m), -self.s),
                TransformScheme::FrakK => frak_denominator(x, *y, self.s, &self.m),
            };
            acc += d * k;
        }
        Ok(acc)
    }
}

#[derive(Debug, Clone)]
enum Analytic {
    Seed { n: i64, p: u8, kappa: f64, m: EllipticModulus },
    Table(StageTable),
}

impl Analytic {
    fn eval(&self, x: C64) -> Result<C64> {
        match self {
            Analytic::Seed { n, p, kappa, m } => seed_analytic(*n, *p, *kappa, x, m),
            Analytic::Table(t) => t.eval(x),
        }
    }
}

struct StageCtx<'a> {
    scheme: TransformScheme,
    quad: QuadScheme,
    g: f64,
    kappa: f64,
    norm: C64,
    eps: f64,
    m: &'a EllipticModulus,
}

fn build_table(ctx: &StageCtx, prev: &Analytic, n_pts: usize) -> Result<StageTable> {
    let (nodes, w): (Vec<C64>, Vec<f64>) = match (ctx.scheme, ctx.quad) {
        (TransformScheme::FrakK, QuadScheme::GaussJacobi) => {
            let r = gauss_jacobi_shared(ctx.g, n_pts)?;
            (r.0.iter().map(|z| C64::new(z.acos(), 0.0)).collect(), r.1.iter().map(|w| w / PI).collect())
        }
        _ => (0..n_pts)
            .map(|k| (C64::new(-PI + 2.0 * PI * k as f64 / n_pts as f64, ctx.eps), 1.0 / n_pts as f64))
            .unzip(),
    };
    let zform = ctx.quad == QuadScheme::GaussJacobi;
    let dens: Vec<C64> = nodes
        .par_iter()
        .zip(w.par_iter())
        .map(|(y, wk)| {
            let pr = prev.eval(*y)?;
            let rho = if zform {
                // The (sin²)^g part is carried by the weight.
                let s = theta1_over_sin(*y, ctx.m);
                int_pow(s, 2.0 * ctx.g)
            } else {
                theta1_sq_pow(*y, ctx.g, ctx.m)?
            };
            Ok(ctx.norm * *wk * rho * pr)
        })
        .collect::<Result<_>>()?;
    Ok(StageTable { scheme: ctx.scheme, zform, nodes, dens, s: 2.0 * ctx.g + ctx.kappa, m: *ctx.m })
}

fn eval_many(t: &StageTable, xs: &[C64]) -> Result<Vec<C64>> {
    xs.par_iter().map(|x| t.eval(*x)).collect()
}

/// Refines by doubling until the probe drift falls below `REFINE_TOL · amplification`; the
/// amplification is the noise gain of earlier `q^{-n}`-normalised steps (1 otherwise).
fn build_stage(
    ctx: &StageCtx,
    prev: &Analytic,
    n0: usize,
    refine: bool,
    probes: &[C64],
    amplification: f64,
) -> Result<(StageTable, usize, Option<f64>)> {
    let cap = if ctx.quad == QuadScheme::GaussJacobi && ctx.scheme == TransformScheme::FrakK { JACOBI_CAP } else { TRAPEZOID_CAP };
    let mut n = n0;
    let mut table = build_table(ctx, prev, n)?;
    if !refine {
        return Ok((table, n, None));
    }
    let mut vals = eval_many(&table, probes)?;
    loop {
        let next = build_table(ctx, prev, 2 * n)?;
        let nv = eval_many(&next, probes)?;
        n *= 2;
        let scale = nv.iter().map(|v| v.norm()).fold(0.0, f64::max).max(1e-300);
        let drift = nv.iter().zip(&vals).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max) / scale;
        table = next;
        vals = nv;
        if drift < REFINE_TOL * amplification {
            return Ok((table, n, Some(drift)));
        }
        if n >= cap {
            if drift <= DRIFT_FAIL * amplification {
                return Ok((table, n, Some(drift)));
            }
            return Err(Error::NonConvergence { drift, n });
        }
    }
}

/// An executed pipeline: evaluates the final solution anywhere on the real line.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub request: PipelineRequest,
    pub modulus: EllipticModulus,
    pub params: ModelParams,
    pub steps: Vec<StepInfo>,
    pub composite: CompositeNorm,
    final_stage: Analytic,
}

fn gamma_ratio_closed_form(req: &PipelineRequest, n_final: i64) -> Option<C64> {
    let big_n = req.numb as f64;
    let l = req.kappa;
    let nf = n_final as f64;
    let mut prod = 1.0;
    for j in 1..=req.numb {
        let jf = j as f64;
        let t = if req.p == 0 {
            gamma(nf + big_n * l + 1.0) * gamma((2.0 * jf + 1.0) * l) * gamma(jf * l)
                / (gamma(nf + (big_n + 2.0 * jf) * l) * gamma((jf + 1.0) * l))
        } else {
            gamma(nf + big_n * l + 1.0) * gamma((2.0 * jf + 1.0) * l + 2.0) * gamma(2.0 * l + 1.0)
                / (gamma(nf + (big_n + 2.0 * jf) * l + 2.0) * gamma((jf + 1.0) * l + 1.0))
        };
        prod *= t;
    }
    let (pow2, phase) = if req.p == 0 {
        (l * big_n * (big_n + 3.0), 0.5 * PI * big_n * (big_n + 1.0) * l)
    } else {
        (big_n * ((big_n + 3.0) * l + 2.0), -0.5 * PI * (big_n * (big_n + 1.0) * l + 2.0))
    };
    let v = C64::from_polar(2f64.powf(pow2) * prod, phase);
    v.is_finite().then_some(v)
}

fn literal_product(req: &PipelineRequest) -> Option<f64> {
    let top = req.n;
    let mut prod = 1.0;
    for k in 1..=req.numb {
        let g = k as f64 * req.kappa + req.p as f64;
        prod *= k_normalization_literal(top, g, req.kappa)?;
    }
    Some(prod)
}

/// Validate a request without running it.
pub fn validate_request(req: &PipelineRequest, m: &EllipticModulus) -> Result<()> {
    if req.numb == 0 {
        return Err(Error::Domain("numb must be at least 1".into()));
    }
    if req.p > 1 {
        return Err(Error::Domain(format!("seed index p must be 0 or 1, got {}", req.p)));
    }
    if req.g0 != req.p as f64 {
        return Err(Error::Domain(format!("the p = {} seed lives at g0 = {}, got g0 = {}", req.p, req.p, req.g0)));
    }
    if req.p == 1 && req.kappa == 0.0 {
        return Err(Error::Domain("the p = 1 seed needs kappa != 0".into()));
    }
    if req.n < 0 {
        return Err(Error::Domain(format!("seed degree must be >= 0, got {}", req.n)));
    }
    match req.scheme {
        TransformScheme::K => {
            if !(req.kappa > 0.0 && req.kappa.fract() == 0.0) {
                return Err(Error::Domain(format!("scheme K needs a positive integer kappa, got {}", req.kappa)));
            }
            let n_final = req.n - req.numb as i64 * req.kappa as i64;
            if n_final < 0 {
                return Err(Error::DegreeUnderflow { n: n_final, numb: req.numb, kappa: req.kappa });
            }
            if req.quad.scheme != QuadScheme::TrapezoidShifted {
                return Err(Error::Domain("scheme K integrates over shifted contours; use the trapezoid".into()));
            }
            req.quad.validate_contour(m)?;
            let last = req.quad.epsilon - 0.05 * (req.numb as f64 - 1.0) * PI * m.tau.im;
            if !(last > 0.0) {
                return Err(Error::Domain(format!("contour shifts eps_j = eps - 0.05 (j-1) pi Im(tau) reach {last} <= 0")));
            }
        }
        TransformScheme::FrakK => {
            for j in 0..req.numb {
                let g = req.g0 + j as f64 * req.kappa;
                if !(2.0 * g + req.kappa > 0.0) || g < 0.0 {
                    return Err(Error::Domain(format!("step {} has 2g + kappa = {} (g = {g}); need g >= 0 and 2g + kappa > 0", j + 1, 2.0 * g + req.kappa)));
                }
                if g.fract() != 0.0 && m.tau.re != 0.0 {
                    return Err(Error::Branch("non-integer g needs purely imaginary tau for the theta4 transform".into()));
                }
            }
            // Roundoff in the low-degree part of each step's output is amplified by the next
            // step's |q|^{-n}, so the budget applies to the composite gain |q|^{-n·numb}.
            check_precision(req.n * req.numb as i64, m)?;
            if req.quad.n == 0 {
                return Err(Error::Domain("quadrature needs N >= 1".into()));
            }
        }
    }
    Ok(())
}

/// Run the iterated transform with tensor-grid composition.
pub fn pipeline(req: &PipelineRequest, m: &EllipticModulus) -> Result<Pipeline> {
    pipeline_with_sizes(req, m, None)
}

/// As [`pipeline`], with the per-step point counts fixed (no refinement) when given.
pub fn pipeline_with_sizes(req: &PipelineRequest, m: &EllipticModulus, sizes: Option<&[usize]>) -> Result<Pipeline> {
    validate_request(req, m)?;
    if let Some(s) = sizes {
        if s.len() != req.numb {
            return Err(Error::Domain(format!("expected {} point counts, got {}", req.numb, s.len())));
        }
    }
    let span = PI * m.tau.im;
    let mut prev = Analytic::Seed { n: req.n, p: req.p, kappa: req.kappa, m: *m };
    let mut steps = Vec::new();
    let mut canonical = 1.0;
    let mut g = req.g0;
    let mut n = req.n;
    let real_probes: Vec<C64> = [-2.3, -0.7, 0.4, 1.9].iter().map(|&t| C64::new(t, 0.0)).collect();
    for j in 0..req.numb {
        let (n_out, norm, c_real, eps) = match req.scheme {
            TransformScheme::K => {
                let c = k_normalization(n, g, req.kappa)?;
                let eps = req.quad.epsilon - 0.05 * j as f64 * span;
                (n - req.kappa as i64, C64::new(c, 0.0), c, Some(eps))
            }
            TransformScheme::FrakK => {
                let mm = frak_normalization(n, g, req.kappa)?;
                (n, m.q.powi(-(n as i32)) * mm, mm, None)
            }
        };
        let ctx = StageCtx {
            scheme: req.scheme,
            quad: req.quad.scheme,
            g,
            kappa: req.kappa,
            norm,
            eps: eps.unwrap_or(0.0),
            m,
        };
        let probes: Vec<C64> = match (req.scheme, j + 1 < req.numb) {
            (TransformScheme::K, true) => {
                let next = req.quad.epsilon - 0.05 * (j + 1) as f64 * span;
                real_probes.iter().map(|p| C64::new(p.re, next)).collect()
            }
            _ => real_probes.clone(),
        };
        let (n0, refine) = match sizes {
            Some(s) => (s[j], false),
            None => (req.quad.n, req.quad.refine),
        };
        // Input noise of a θ₄ step is not orthogonal to low degrees, so each earlier
        // q^{-n}-normalised step multiplies the attainable relative accuracy by |q|^{-n}.
        let amplification = match req.scheme {
            TransformScheme::K => 1.0,
            TransformScheme::FrakK => m.q.norm().powi(-(req.n as i32)).powi(j as i32),
        };
        let (table, used, drift) = build_stage(&ctx, &prev, n0, refine, &probes, amplification)?;
        steps.push(StepInfo {
            index: j + 1,
            g_in: g,
            g_out: g + req.kappa,
            n_in: n,
            n_out,
            epsilon: eps,
            n_points: used,
            normalization: c_real,
            drift,
        });
        canonical *= c_real;
        prev = Analytic::Table(table);
        g += req.kappa;
        n = n_out;
    }
    let composite = match req.scheme {
        TransformScheme::K => CompositeNorm {
            canonical,
            literal_product: literal_product(req),
            literal_closed_form: gamma_ratio_closed_form(req, n),
        },
        TransformScheme::FrakK => CompositeNorm { canonical, literal_product: None, literal_closed_form: None },
    };
    Ok(Pipeline {
        request: *req,
        modulus: *m,
        params: ModelParams::new(n, g, req.kappa),
        steps,
        composite,
        final_stage: prev,
    })
}

impl Pipeline {
    /// Point counts used by each step.
    pub fn sizes(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.n_points).collect()
    }

    /// Analytic part `P(x)` of the output.
    pub fn eval_p(&self, x: C64) -> Result<C64> {
        self.final_stage.eval(x)
    }

    /// `ψ(x) = (θ₁(x)²)^{g/2} P(x)` for real `x`.
    pub fn eval_psi(&self, x: f64) -> Result<C64> {
        let xc = C64::new(x, 0.0);
        Ok(theta1_sq_pow(xc, 0.5 * self.params.g, &self.modulus)? * self.eval_p(xc)?)
    }

    pub fn eval_psi_many(&self, xs: &[f64]) -> Result<Vec<C64>> {
        xs.par_iter().map(|&x| self.eval_psi(x)).collect()
    }

    /// Energy of the output: `E_{n_final, g_final}`.
    pub fn energy(&self) -> C64 {
        crate::specfun::energy(self.params.n, self.params.g, &self.modulus)
    }

    /// The same request re-executed at `τ + dτ` with this run's point counts.
    pub fn at_shifted_tau(&self, dtau: C64) -> Result<Pipeline> {
        let m = self.modulus.shifted(dtau)?;
        let mut req = self.request;
        if req.scheme == TransformScheme::K {
            // Keep the absolute contour shifts of the central run.
            req.quad.epsilon = self.steps[0].epsilon.unwrap_or(req.quad.epsilon);
            let top = PI * m.tau.im;
            let last = req.quad.epsilon - 0.05 * (req.numb as f64 - 1.0) * top;
            if !(req.quad.epsilon < top && last > 0.0) {
                return Err(Error::Domain("shifted tau leaves the contour window".into()));
            }
        }
        let sizes = self.sizes();
        pipeline_with_sizes(&req, &m, Some(&sizes))
    }

    pub fn sample(&self, xs: &[f64]) -> Result<SampledSolution> {
        Ok(SampledSolution {
            xs: xs.to_vec(),
            values: self.eval_psi_many(xs)?,
            params: self.params,
            energy: self.energy(),
            provenance: Provenance {
                request: self.request,
                tau: self.modulus.tau,
                steps: self.steps.clone(),
                composite: self.composite.clone(),
            },
        })
    }
}

/// Closed-contour form of the transform of an irregular seed `P_irr` at integer `(g, Λ)`:
/// `(1/(s-1)!) ∂_ξ^{s-1} F(ξ)|_{ξ = cos x}`, `s = 2g+Λ`, with
/// `F(ξ) = Π_k (1 - 2u_k(2ξ²-1) + u_k²) P_irr(ξ) / Π_k D_k(cos x, ξ)^s`, `u_k = q^{2k}`,
/// by the trapezoid on the circle `|ξ - cos x| = radius`.
pub fn transform_irregular(
    p_irr: &(dyn Fn(C64) -> C64 + Sync),
    g: f64,
    kappa: f64,
    x: f64,
    radius: f64,
    n_pts: usize,
    m: &EllipticModulus,
) -> Result<C64> {
    if !(g > 0.0 && g.fract() == 0.0 && kappa > 0.0 && kappa.fract() == 0.0) {
        return Err(Error::Domain(format!("irregular transform needs positive integers (g, kappa), got ({g}, {kappa})")));
    }
    if !(radius > 0.0) || n_pts == 0 {
        return Err(Error::Domain("radius and point count must be positive".into()));
    }
    let z = x.cos();
    let s = (2.0 * g + kappa) as i32;
    let q2 = m.q2();
    let us: Vec<C64> = (1..=m.series_terms).scan(C64::new(1.0, 0.0), |u, _| {
        *u *= q2;
        Some(*u)
    }).collect();
    // Branch points of D_k in ξ must stay outside the circle.
    for u in &us {
        let a = 4.0 * u * u;
        let b = -4.0 * u * (1.0 + u * u) * z;
        let c = 1.0 - 2.0 * u * u + u.powi(4) + 4.0 * u * u * z * z;
        if a.norm() < 1e-300 {
            continue;
        }
        let disc = (b * b - 4.0 * a * c).sqrt();
        for r in [(-b + disc) / (2.0 * a), (-b - disc) / (2.0 * a)] {
            if (r - z).norm() <= radius {
                return Err(Error::Enclosure(format!("singularity at xi = {r} lies within radius {radius} of cos x = {z}")));
            }
        }
    }
    let f = |xi: C64| -> C64 {
        let mut num = C64::new(1.0, 0.0);
        let mut den = C64::new(1.0, 0.0);
        for u in &us {
            num *= 1.0 - 2.0 * u * (2.0 * xi * xi - 1.0) + u * u;
            den *= 4.0 * u * u * xi * xi - 4.0 * u * (1.0 + u * u) * z * xi
                + (1.0 - 2.0 * u * u + u.powi(4) + 4.0 * u * u * z * z);
        }
        num * p_irr(xi) / den.powi(s)
    };
    let terms: Vec<C64> = (0..n_pts)
        .into_par_iter()
        .map(|j| {
            let w = C64::from_polar(radius, 2.0 * PI * j as f64 / n_pts as f64);
            f(z + w) * w.powi(1 - s)
        })
        .collect();
    let acc = ordered_sum(terms);
    Ok(acc / n_pts as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_rule_integrates_polynomials() {
        let (z, w) = gauss_jacobi_rule(1.5, 6).unwrap();
        let mu0: f64 = w.iter().sum();
        assert!((mu0 - PI.sqrt() * gamma(2.0) / gamma(2.5)).abs() < 1e-13);
        let m2: f64 = z.iter().zip(&w).map(|(z, w)| w * z * z).sum();
        // ∫(1-z²)^{g-1/2} z² = μ₀/(2g+2).
        assert!((m2 - mu0 / 5.0).abs() < 1e-13);
    }

    #[test]
    fn trapezoid_constant() {
        let m = EllipticModulus::new(C64::new(0.0, 1.0)).unwrap();
        let spec = QuadratureSpec::default_for(&m);
        let v = quad_periodic(&|_| Ok(C64::new(1.0, 0.0)), &spec).unwrap();
        assert!((v - 1.0).norm() < 1e-15);
    }

    #[test]
    fn normalization_special_cases() {
        assert_eq!(k_normalization(3, 0.0, 1.0).unwrap(), 0.5);
        assert!(k_normalization(0, 1.0, 1.0).is_err());
        assert_eq!(frak_normalization(2, 0.0, 0.5).unwrap(), 1.0);
    }
}
