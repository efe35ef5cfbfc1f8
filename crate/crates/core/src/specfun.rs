//! Elliptic and orthogonal-polynomial special functions with the real period fixed to π.
//!
//! Conventions:
//! - nome `q = exp(iπτ)`, `G = Π(1-q^{2n})`, `η₁/π = 1/12 - 2Σ q^{2n}/(1-q^{2n})²`;
//! - `θ₁,θ₂` are the Jacobi `ϑ₁,ϑ₂` divided by `2q^{1/4}`, `θ₃,θ₄` equal `ϑ₃,ϑ₄`;
//! - `℘` has periods `(π, πτ)` and tends to `1/sin²x - 1/3` as `q → 0`.

use crate::error::{Error, Result};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Infinite products and sums stop once `|q|^{2k}` falls below this.
pub const TRUNCATION_TARGET: f64 = 1e-15;

/// Threshold under which a theta value is treated as a zero of the function.
pub const POLE_GUARD: f64 = 1e-8;

const TAIL: f64 = 1e-17;
const MAX_TERMS: usize = 20_000;

/// The modular parameter with its derived constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipticModulus {
    pub tau: C64,
    pub q: C64,
    #[serde(rename = "G")]
    pub big_g: C64,
    pub eta1_over_pi: C64,
    pub series_terms: usize,
}

/// Smallest `k ≥ 1` with `|q|^{2k} < TRUNCATION_TARGET`.
pub fn default_terms(tau: C64) -> usize {
    let lnq = -PI * tau.im;
    if lnq >= 0.0 {
        return 1;
    }
    let k = (TRUNCATION_TARGET.ln() / (2.0 * lnq)).ceil();
    (k.max(1.0) as usize).min(MAX_TERMS)
}

pub fn make_modulus(tau: C64, series_terms: usize) -> Result<EllipticModulus> {
    if !(tau.im > 0.0) || !tau.re.is_finite() {
        return Err(Error::Domain(format!(
            "Im(tau) must be positive (got tau = {tau}); the equation lives on the upper half-plane"
        )));
    }
    if series_terms == 0 {
        return Err(Error::Domain("series_terms must be at least 1".into()));
    }
    let q = (C64::i() * PI * tau).exp();
    if !(q.norm() < 1.0) {
        return Err(Error::Domain(format!("|q| = {} is not below 1", q.norm())));
    }
    let q2 = q * q;
    let mut q2n = C64::new(1.0, 0.0);
    let mut big_g = C64::new(1.0, 0.0);
    let mut s = C64::new(0.0, 0.0);
    for _ in 0..series_terms {
        q2n *= q2;
        let one_minus = 1.0 - q2n;
        big_g *= one_minus;
        s += q2n / (one_minus * one_minus);
    }
    Ok(EllipticModulus {
        tau,
        q,
        big_g,
        eta1_over_pi: C64::new(1.0 / 12.0, 0.0) - 2.0 * s,
        series_terms,
    })
}

impl EllipticModulus {
    /// Modulus with the default truncation rule.
    pub fn new(tau: C64) -> Result<Self> {
        make_modulus(tau, default_terms(tau))
    }

    /// Modulus for a real positive nome `q`, i.e. `τ = i·ln(1/q)/π`.
    pub fn from_real_nome(q: f64) -> Result<Self> {
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::Domain(format!("nome must lie in (0,1), got {q}")));
        }
        Self::new(C64::new(0.0, -q.ln() / PI))
    }

    /// The same modulus at `τ + dτ` (used by τ-stencils).
    pub fn shifted(&self, dtau: C64) -> Result<Self> {
        let tau = self.tau + dtau;
        make_modulus(tau, self.series_terms.max(default_terms(tau)))
    }

    pub fn q2(&self) -> C64 {
        self.q * self.q
    }
}

/// `θ_ν(x)` in product form, `ν ∈ {1,2,3,4}`.
pub fn theta(nu: u8, x: C64, m: &EllipticModulus) -> Result<C64> {
    match nu {
        1 => Ok(theta1(x, m)),
        2 => Ok(theta2(x, m)),
        3 => Ok(theta3(x, m)),
        4 => Ok(theta4(x, m)),
        _ => Err(Error::Domain(format!("theta index must be 1..4, got {nu}"))),
    }
}

// Π_{n≥1}(1 + sign·2 a_n cos2x + a_n²) where a_n = start·step^{n-1}.
fn cos_product(c2: C64, start: C64, step: C64, sign: f64, m: &EllipticModulus) -> C64 {
    let mut a = start;
    let mut p = C64::new(1.0, 0.0);
    for n in 1..=MAX_TERMS {
        let t = sign * 2.0 * a * c2 + a * a;
        p *= 1.0 + t;
        if n >= m.series_terms && t.norm() < TAIL {
            break;
        }
        a *= step;
    }
    p
}

pub fn theta1(x: C64, m: &EllipticModulus) -> C64 {
    let q2 = m.q2();
    m.big_g * x.sin() * cos_product((2.0 * x).cos(), q2, q2, -1.0, m)
}

pub fn theta2(x: C64, m: &EllipticModulus) -> C64 {
    let q2 = m.q2();
    m.big_g * x.cos() * cos_product((2.0 * x).cos(), q2, q2, 1.0, m)
}

pub fn theta3(x: C64, m: &EllipticModulus) -> C64 {
    m.big_g * cos_product((2.0 * x).cos(), m.q, m.q2(), 1.0, m)
}

pub fn theta4(x: C64, m: &EllipticModulus) -> C64 {
    m.big_g * cos_product((2.0 * x).cos(), m.q, m.q2(), -1.0, m)
}

/// `θ₁(x)/sin(x)`: analytic and zero-free in the strip `|Im x| < πIm τ`.
pub fn theta1_over_sin(x: C64, m: &EllipticModulus) -> C64 {
    let q2 = m.q2();
    m.big_g * cos_product((2.0 * x).cos(), q2, q2, -1.0, m)
}

/// `(θ₁, θ₁′, θ₁″)` from the sine series `Σ(-1)^n q^{n(n+1)} sin((2n+1)x)`.
pub fn theta1_derivs(x: C64, m: &EllipticModulus) -> (C64, C64, C64) {
    let mut f = C64::new(0.0, 0.0);
    let mut f1 = C64::new(0.0, 0.0);
    let mut f2 = C64::new(0.0, 0.0);
    let mut p = C64::new(1.0, 0.0);
    let growth = x.im.abs();
    for n in 0..MAX_TERMS {
        let k = (2 * n + 1) as f64;
        let sgn = if n % 2 == 0 { 1.0 } else { -1.0 };
        let (s, c) = ((k * x).sin(), (k * x).cos());
        f += sgn * p * s;
        f1 += sgn * p * k * c;
        f2 -= sgn * p * k * k * s;
        let bound = p.norm() * k * k * (k * growth).exp();
        if n >= 1 && bound < TAIL * (1.0 + f.norm() + f1.norm()) {
            break;
        }
        p *= m.q2().powu((n + 1) as u32);
    }
    (f, f1, f2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WpMethod {
    Fourier,
    Theta,
}

/// Weierstrass `℘(x)` with periods `(π, πτ)`.
pub fn wp(x: C64, m: &EllipticModulus, method: WpMethod) -> Result<C64> {
    match method {
        WpMethod::Theta => {
            let (t, t1, t2) = theta1_derivs(x, m);
            if t.norm() < POLE_GUARD {
                return Err(Error::Pole(format!("wp: theta1({x}) vanishes")));
            }
            let r = t1 / t;
            Ok(r * r - t2 / t - 4.0 * m.eta1_over_pi)
        }
        WpMethod::Fourier => {
            let s = x.sin();
            if s.norm() < POLE_GUARD {
                return Err(Error::Pole(format!("wp: sin({x}) vanishes")));
            }
            let q2 = m.q2();
            let mut q2k = C64::new(1.0, 0.0);
            let mut acc = C64::new(0.0, 0.0);
            let growth = 2.0 * x.im.abs();
            for k in 1..=MAX_TERMS {
                q2k *= q2;
                let kf = k as f64;
                acc += kf * q2k / (1.0 - q2k) * (2.0 * kf * x).cos();
                if k >= m.series_terms && kf * q2k.norm() * (kf * growth).exp() < TAIL {
                    break;
                }
            }
            Ok(1.0 / (s * s) - 4.0 * m.eta1_over_pi - 8.0 * acc)
        }
    }
}

/// `℘` by the theta formula; the default used by operators.
pub fn wp_theta(x: C64, m: &EllipticModulus) -> Result<C64> {
    wp(x, m, WpMethod::Theta)
}

/// `C_n^{(g)}(z)` by the upward three-term recurrence.
pub fn gegenbauer(n: usize, g: f64, z: C64) -> C64 {
    let mut prev = C64::new(1.0, 0.0);
    if n == 0 {
        return prev;
    }
    let mut cur = 2.0 * g * z;
    for k in 2..=n {
        let kf = k as f64;
        let next = (2.0 * z * (kf + g - 1.0) * cur - (kf + 2.0 * g - 2.0) * prev) / kf;
        prev = cur;
        cur = next;
    }
    cur
}

/// `C_0^{(g)}(z), …, C_{nmax}^{(g)}(z)`.
pub fn gegenbauer_all(nmax: usize, g: f64, z: C64) -> Vec<C64> {
    let mut out = Vec::with_capacity(nmax + 1);
    out.push(C64::new(1.0, 0.0));
    if nmax >= 1 {
        out.push(2.0 * g * z);
    }
    for k in 2..=nmax {
        let kf = k as f64;
        let v = (2.0 * z * (kf + g - 1.0) * out[k - 1] - (kf + 2.0 * g - 2.0) * out[k - 2]) / kf;
        out.push(v);
    }
    out
}

/// `𝔥_n = 2^{1-2g} Γ(n+2g) / (n! (n+g) Γ(g)²)`, the squared norm of `C_n^{(g)}` under
/// `∫dy/2π (sin²y)^g`.
pub fn gegenbauer_norm(n: usize, g: f64) -> Result<f64> {
    use statrs::function::gamma::ln_gamma;
    if !(g > 0.0) {
        return Err(Error::Domain(format!("gegenbauer_norm needs g > 0, got {g}")));
    }
    let nf = n as f64;
    let ln = (1.0 - 2.0 * g) * 2f64.ln() + ln_gamma(nf + 2.0 * g)
        - ln_gamma(nf + 1.0)
        - (nf + g).ln()
        - 2.0 * ln_gamma(g);
    Ok(ln.exp())
}

/// Rising factorial `(x)_n`.
pub fn pochhammer(x: C64, n: usize) -> C64 {
    (0..n).fold(C64::new(1.0, 0.0), |acc, k| acc * (x + k as f64))
}

/// Real rising factorial.
pub fn pochhammer_re(x: f64, n: usize) -> f64 {
    (0..n).fold(1.0, |acc, k| acc * (x + k as f64))
}

/// Divisor sum `σ₁(ℓ)`.
pub fn divisor_sigma(ell: usize) -> f64 {
    (1..=ell).filter(|d| ell % d == 0).map(|d| d as f64).sum()
}

/// The coupling pair `(Λ, g)` with the degree `n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub kappa: f64,
    pub g: f64,
    pub n: i64,
}

impl ModelParams {
    pub fn new(n: i64, g: f64, kappa: f64) -> Self {
        ModelParams { kappa, g, n }
    }

    pub fn validate_basic(&self) -> Result<()> {
        if !self.g.is_finite() || self.g < 0.0 {
            return Err(Error::Domain(format!("g must be finite and >= 0, got {}", self.g)));
        }
        if !self.kappa.is_finite() {
            return Err(Error::Domain("kappa must be finite".into()));
        }
        if self.n < 0 {
            return Err(Error::Domain(format!("degree n must be >= 0, got {}", self.n)));
        }
        Ok(())
    }

    /// Hypothesis of the θ₄-kernel transform: `2g + Λ > 0`.
    pub fn validate_frak_k(&self) -> Result<()> {
        self.validate_basic()?;
        if !(2.0 * self.g + self.kappa > 0.0) {
            return Err(Error::Domain(format!(
                "2g + kappa must be positive, got {}",
                2.0 * self.g + self.kappa
            )));
        }
        Ok(())
    }

    /// Hypothesis of the shifted-contour transform: `Λ` a nonzero integer, `g` an integer.
    pub fn validate_k(&self) -> Result<()> {
        self.validate_basic()?;
        if self.kappa == 0.0 || self.kappa.fract() != 0.0 {
            return Err(Error::Domain(format!(
                "kappa must be a nonzero integer for the shifted-contour transform, got {}",
                self.kappa
            )));
        }
        if self.g.fract() != 0.0 {
            return Err(Error::Domain(format!(
                "non-integer g = {} has branch cuts on the real axis; use the theta4 transform",
                self.g
            )));
        }
        Ok(())
    }
}

/// `E_{n,g} = (n+g)² - 4g(g-1)η₁/π + 6g²(η₁/π - 1/12)`.
pub fn energy(n: i64, g: f64, m: &EllipticModulus) -> C64 {
    let e = m.eta1_over_pi;
    let ng = n as f64 + g;
    ng * ng - 4.0 * g * (g - 1.0) * e + 6.0 * g * g * (e - 1.0 / 12.0)
}

/// Coefficients of `q^{2ℓ}` in `E_{n,g}`, `ℓ = 0..=L`.
pub fn energy_series(n: i64, g: f64, l_max: usize) -> Vec<f64> {
    let ng = n as f64 + g;
    let mut out = vec![ng * ng - g * (g - 1.0) / 3.0];
    for ell in 1..=l_max {
        out.push(-4.0 * g * (g + 2.0) * divisor_sigma(ell));
    }
    out
}
