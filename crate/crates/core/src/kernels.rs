//! Kernel functions `k_μ`, the normalised kernel `𝕜`, their identity constants, the Lamé
//! operator, and finite-difference residuals of the generalized kernel function identities.
//!
//! Non-integer powers use the principal logarithm at the evaluation point. Residuals are
//! computed on ratios `k(p)/k(p₀)` against the stencil centre `p₀`, which is the
//! continuity-tracked branch along each (short) stencil path.

use crate::error::{Error, Result};
use crate::specfun::{theta, theta1, wp_theta, EllipticModulus, ModelParams, POLE_GUARD};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelPoint {
    pub x: C64,
    pub y: C64,
    pub params: ModelParams,
    pub modulus: EllipticModulus,
}

/// Which kernel: `𝕜` (θ₁ denominators with the `G^{3(2g+Λ)}` prefactor) or `k_μ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelKind {
    CalK,
    Mu(u8),
}

impl KernelKind {
    /// `0` selects `𝕜`, `1..=4` select `k_μ`.
    pub fn from_index(mu: i64) -> Result<Self> {
        match mu {
            0 => Ok(KernelKind::CalK),
            1..=4 => Ok(KernelKind::Mu(mu as u8)),
            _ => Err(Error::Domain(format!("mu must be 0 (normalised kernel) or 1..4, got {mu}"))),
        }
    }
}

// base^e with integer exponents kept exact.
fn power(base: C64, e: f64) -> Result<C64> {
    if e == 0.0 {
        return Ok(C64::new(1.0, 0.0));
    }
    if base == C64::new(0.0, 0.0) {
        return if e > 0.0 {
            Ok(base)
        } else {
            Err(Error::Pole("zero raised to a negative power".into()))
        };
    }
    if e.fract() == 0.0 && e.abs() < 1e6 {
        Ok(base.powi(e as i32))
    } else {
        Ok((e * base.ln()).exp())
    }
}

/// The multiplicative factors `(base, exponent)` of a kernel at `(x, y)`.
pub fn kernel_factors(
    kind: KernelKind,
    x: C64,
    y: C64,
    g: f64,
    kappa: f64,
    m: &EllipticModulus,
) -> Result<Vec<(C64, f64)>> {
    let s = 2.0 * g + kappa;
    let a = 0.5 * (x + y);
    let b = 0.5 * (x - y);
    let (da, db) = match kind {
        KernelKind::CalK => (theta1(a, m), theta1(b, m)),
        KernelKind::Mu(mu) => (theta(mu, a, m)?, theta(mu, b, m)?),
    };
    if da.norm() < POLE_GUARD || db.norm() < POLE_GUARD {
        return Err(Error::Pole(format!("kernel denominator vanishes at x={x}, y={y}")));
    }
    let tx = theta1(x, m);
    let ty = theta1(y, m);
    Ok(match kind {
        KernelKind::CalK => vec![
            (m.big_g, 3.0 * s),
            (tx, g + kappa),
            (ty, g),
            (da, -s),
            (db, -s),
        ],
        KernelKind::Mu(_) => vec![
            (tx * tx, 0.5 * (g + kappa)),
            (ty * ty, 0.5 * g),
            (da, -s),
            (db, -s),
        ],
    })
}

fn product_of(factors: &[(C64, f64)]) -> Result<C64> {
    factors
        .iter()
        .try_fold(C64::new(1.0, 0.0), |acc, &(b, e)| Ok(acc * power(b, e)?))
}

/// `k_μ(x,y) = (θ₁(x)²)^{(g+Λ)/2}(θ₁(y)²)^{g/2} / (θ_μ(½(x+y))θ_μ(½(x-y)))^{2g+Λ}`.
pub fn kernel_k(mu: u8, p: &KernelPoint) -> Result<C64> {
    let f = kernel_factors(KernelKind::Mu(mu), p.x, p.y, p.params.g, p.params.kappa, &p.modulus)?;
    product_of(&f)
}

/// `𝕜(x,y) = G^{3(2g+Λ)} θ₁(x)^{g+Λ} θ₁(y)^g / (θ₁(½(x+y))θ₁(½(x-y)))^{2g+Λ}`.
pub fn kernel_calk(p: &KernelPoint) -> Result<C64> {
    let f = kernel_factors(KernelKind::CalK, p.x, p.y, p.params.g, p.params.kappa, &p.modulus)?;
    product_of(&f)
}

pub fn kernel_value(kind: KernelKind, p: &KernelPoint) -> Result<C64> {
    let f = kernel_factors(kind, p.x, p.y, p.params.g, p.params.kappa, &p.modulus)?;
    product_of(&f)
}

/// `C_μ` of the identity satisfied by `k_μ`.
pub fn kernel_constant(mu: u8, g: f64, kappa: f64, m: &EllipticModulus) -> Result<C64> {
    if !(1..=4).contains(&mu) {
        return Err(Error::Domain(format!("mu must be 1..4, got {mu}")));
    }
    let e = m.eta1_over_pi;
    let s = 2.0 * g + kappa;
    let base = 4.0 * kappa * (1.0 - 2.0 * g - kappa) * e + 6.0 * kappa * s * (e - 1.0 / 12.0);
    Ok(if mu >= 3 { base + kappa * s } else { base })
}

/// `C = 4Λ(1-2g-Λ)η₁/π`, the constant for `𝕜`.
pub fn kernel_constant_calk(g: f64, kappa: f64, m: &EllipticModulus) -> C64 {
    4.0 * kappa * (1.0 - 2.0 * g - kappa) * m.eta1_over_pi
}

pub fn kind_constant(kind: KernelKind, g: f64, kappa: f64, m: &EllipticModulus) -> Result<C64> {
    match kind {
        KernelKind::CalK => Ok(kernel_constant_calk(g, kappa, m)),
        KernelKind::Mu(mu) => kernel_constant(mu, g, kappa, m),
    }
}

/// Fourth-order five-point second derivative from samples at `-2h..2h`.
pub fn second_difference(f: [C64; 5], h: f64) -> C64 {
    (-f[0] + 16.0 * f[1] - 30.0 * f[2] + 16.0 * f[3] - f[4]) / (12.0 * h * h)
}

/// Fourth-order five-point first derivative from samples at `-2h..2h`.
pub fn first_difference(f: [C64; 5], h: f64) -> C64 {
    (f[0] - 8.0 * f[1] + 8.0 * f[3] - f[4]) / (12.0 * h)
}

/// `H_L(x;g) f = -f″(x) + g(g-1)℘(x) f(x)`, with `f″` from the five-point stencil.
pub fn lame_apply(
    f: &dyn Fn(C64) -> Result<C64>,
    x: C64,
    g: f64,
    m: &EllipticModulus,
    h: f64,
) -> Result<C64> {
    let mut s = [C64::new(0.0, 0.0); 5];
    for (j, v) in s.iter_mut().enumerate() {
        *v = f(x + (j as f64 - 2.0) * h)?;
    }
    let coupling = g * (g - 1.0);
    let pot = if coupling == 0.0 {
        C64::new(0.0, 0.0)
    } else {
        coupling * wp_theta(x, m)? * s[2]
    };
    Ok(-second_difference(s, h) + pot)
}

/// Relative residual of the generalized kernel function identity at `p`.
pub fn kernel_identity_residual(kind: KernelKind, p: &KernelPoint, h_x: f64, h_tau: f64) -> Result<f64> {
    let c = kind_constant(kind, p.params.g, p.params.kappa, &p.modulus)?;
    kernel_identity_residual_with(kind, p, h_x, h_tau, c)
}

/// As [`kernel_identity_residual`] with an explicit identity constant.
pub fn kernel_identity_residual_with(
    kind: KernelKind,
    p: &KernelPoint,
    h_x: f64,
    h_tau: f64,
    constant: C64,
) -> Result<f64> {
    let g = p.params.g;
    let kappa = p.params.kappa;
    let m0 = p.modulus;
    let centre = kernel_factors(kind, p.x, p.y, g, kappa, &m0)?;
    let ratio = |x: C64, y: C64, m: &EllipticModulus| -> Result<C64> {
        let f = kernel_factors(kind, x, y, g, kappa, m)?;
        let mut lg = C64::new(0.0, 0.0);
        for (&(b, e), &(b0, _)) in f.iter().zip(centre.iter()) {
            if e != 0.0 {
                lg += e * (b / b0).ln();
            }
        }
        Ok(lg.exp())
    };
    let mut sx = [C64::new(0.0, 0.0); 5];
    let mut sy = [C64::new(0.0, 0.0); 5];
    let mut st = [C64::new(0.0, 0.0); 5];
    for j in 0..5 {
        let d = j as f64 - 2.0;
        sx[j] = ratio(p.x + d * h_x, p.y, &m0)?;
        sy[j] = ratio(p.x, p.y + d * h_x, &m0)?;
        let mj = m0.shifted(C64::new(0.0, d * h_tau))?;
        st[j] = ratio(p.x, p.y, &mj)?;
    }
    // τ moves along the imaginary axis: d/dτ = -i d/ds.
    let dtau = -C64::i() * first_difference(st, h_tau);
    let gx = g + kappa;
    let pot_x = if gx * (gx - 1.0) == 0.0 { C64::new(0.0, 0.0) } else { gx * (gx - 1.0) * wp_theta(p.x, &m0)? };
    let pot_y = if g * (g - 1.0) == 0.0 { C64::new(0.0, 0.0) } else { g * (g - 1.0) * wp_theta(p.y, &m0)? };
    let hx = -second_difference(sx, h_x) + pot_x;
    let hy = -second_difference(sy, h_x) + pot_y;
    let r = C64::i() * (2.0 / PI) * kappa * dtau + hx - hy - constant;
    Ok(r.norm())
}

/// Analyticity-region test for complex points of the θ₁ kernels:
/// `|Im x| < πIm τ` and `|Im x| < Im y < 2πIm τ - |Im x|`.
pub fn in_analytic_region(x: C64, y: C64, m: &EllipticModulus) -> bool {
    let t = PI * m.tau.im;
    let ax = x.im.abs();
    ax < t && ax < y.im && y.im < 2.0 * t - ax
}
