//! Formal q²-series with polynomial coefficients, the Gegenbauer-coefficient recursion for
//! the order-by-order equations, the stationary (Λ = 0) Rayleigh–Schrödinger mode, the
//! conversion between the `sin`-prefactor ("tilde") and `θ₁`-prefactor ("plain") bases, and
//! an independent dense Galerkin oracle.
//!
//! Writing `ψ = (sin²x)^{g/2} P̃(cos x)` the equation at order `q^{2ℓ}` reads
//! `[(m-n)(m+n+2g) - 4Λℓ] d(ℓ,m) = [Σ_{ℓ'=1}^{ℓ} (E^{(ℓ')} - W^{(ℓ')}) P̃^{(ℓ-ℓ')}]_m`
//! where `[·]_m` is the `C_m^{(g)}` coefficient and `W^{(ℓ)}` the `q^{2ℓ}` part of the
//! regular potential.

use crate::error::{Error, Result};
use crate::specfun::{divisor_sigma, energy_series, gegenbauer_all, theta1, EllipticModulus, ModelParams};
use crate::transforms::gauss_jacobi_rule;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Highest polynomial degree handled by the monomial-basis algebra.
pub const DEGREE_CAP: usize = 40;

/// Polynomial in `z`, ascending monomial coefficients.
pub type Poly = Vec<f64>;

pub fn poly_add(a: &[f64], b: &[f64]) -> Poly {
    let mut out = vec![0.0; a.len().max(b.len())];
    for (i, v) in a.iter().enumerate() {
        out[i] += v;
    }
    for (i, v) in b.iter().enumerate() {
        out[i] += v;
    }
    out
}

pub fn poly_scale(a: &[f64], s: f64) -> Poly {
    a.iter().map(|v| v * s).collect()
}

pub fn poly_mul(a: &[f64], b: &[f64]) -> Poly {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        if *x == 0.0 {
            continue;
        }
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

pub fn poly_eval(a: &[f64], z: C64) -> C64 {
    a.iter().rev().fold(C64::new(0.0, 0.0), |acc, &c| acc * z + c)
}

/// Degree ignoring trailing coefficients below `tol` in magnitude.
pub fn poly_degree(a: &[f64], tol: f64) -> Option<usize> {
    a.iter().rposition(|v| v.abs() > tol)
}

/// Chebyshev `T_k` in monomial form.
pub fn chebyshev_t(k: usize) -> Poly {
    let mut p0 = vec![1.0];
    if k == 0 {
        return p0;
    }
    let mut p1 = vec![0.0, 1.0];
    for _ in 1..k {
        let next = poly_add(&poly_mul(&[0.0, 2.0], &p1), &poly_scale(&p0, -1.0));
        p0 = p1;
        p1 = next;
    }
    p1
}

/// Orthogonal basis `B_m` used for the expansion: `C_m^{(g)}` for `g > 0`, and the `g → 0`
/// normalised limit `T_m` (Chebyshev, `cos(mx)`) at `g = 0`.
#[derive(Debug, Clone)]
pub struct PolyBasis {
    pub g: f64,
    polys: Vec<Poly>,
}

impl PolyBasis {
    pub fn new(g: f64, max_degree: usize) -> Result<Self> {
        if max_degree > DEGREE_CAP {
            return Err(Error::DegreeCap(max_degree));
        }
        if g < 0.0 {
            return Err(Error::Domain(format!("basis needs g >= 0, got {g}")));
        }
        let mut polys: Vec<Poly> = Vec::with_capacity(max_degree + 1);
        if g == 0.0 {
            for k in 0..=max_degree {
                polys.push(chebyshev_t(k));
            }
        } else {
            polys.push(vec![1.0]);
            if max_degree >= 1 {
                polys.push(vec![0.0, 2.0 * g]);
            }
            for k in 2..=max_degree {
                let kf = k as f64;
                let a = poly_scale(&poly_mul(&[0.0, 2.0], &polys[k - 1]), (kf + g - 1.0) / kf);
                let b = poly_scale(&polys[k - 2], -(kf + 2.0 * g - 2.0) / kf);
                polys.push(poly_add(&a, &b));
            }
        }
        Ok(PolyBasis { g, polys })
    }

    pub fn max_degree(&self) -> usize {
        self.polys.len() - 1
    }

    pub fn poly(&self, m: usize) -> &Poly {
        &self.polys[m]
    }

    /// Coefficients of `p` in this basis (triangular back-substitution).
    pub fn expand(&self, p: &[f64]) -> Result<Vec<f64>> {
        let deg = poly_degree(p, 0.0).unwrap_or(0);
        if deg > self.max_degree() {
            return Err(Error::DegreeCap(deg));
        }
        let mut r: Poly = p.to_vec();
        r.resize(deg + 1, 0.0);
        let mut c = vec![0.0; deg + 1];
        for k in (0..=deg).rev() {
            let bk = &self.polys[k];
            let ck = r[k] / bk[k];
            c[k] = ck;
            for (i, v) in bk.iter().enumerate() {
                r[i] -= ck * v;
            }
        }
        Ok(c)
    }

    /// `Σ c_m B_m`.
    pub fn combine(&self, coeffs: &BTreeMap<usize, f64>) -> Poly {
        let mut out = Vec::new();
        for (&m, &v) in coeffs {
            out = poly_add(&out, &poly_scale(&self.polys[m], v));
        }
        out
    }
}

/// Truncated series `Σ_{ℓ=0}^{L} p_ℓ(z) q^{2ℓ}` with polynomial coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct QSeriesPoly {
    pub l: usize,
    pub coeffs: Vec<Poly>,
}

impl QSeriesPoly {
    pub fn zero(l: usize) -> Self {
        QSeriesPoly { l, coeffs: vec![Vec::new(); l + 1] }
    }

    pub fn one(l: usize) -> Self {
        let mut s = Self::zero(l);
        s.coeffs[0] = vec![1.0];
        s
    }

    pub fn truncate(&self, l: usize) -> Self {
        let l = l.min(self.l);
        QSeriesPoly { l, coeffs: self.coeffs[..=l].to_vec() }
    }

    pub fn add(&self, o: &Self) -> Self {
        let l = self.l.min(o.l);
        QSeriesPoly { l, coeffs: (0..=l).map(|k| poly_add(&self.coeffs[k], &o.coeffs[k])).collect() }
    }

    pub fn scale(&self, s: f64) -> Self {
        QSeriesPoly { l: self.l, coeffs: self.coeffs.iter().map(|p| poly_scale(p, s)).collect() }
    }

    pub fn mul(&self, o: &Self) -> Self {
        let l = self.l.min(o.l);
        let mut out = Self::zero(l);
        for i in 0..=l {
            for j in 0..=(l - i) {
                let t = poly_mul(&self.coeffs[i], &o.coeffs[j]);
                out.coeffs[i + j] = poly_add(&out.coeffs[i + j], &t);
            }
        }
        out
    }

    /// Formal `exp(S)` for a series with vanishing `q⁰` part.
    pub fn exp(&self) -> Result<Self> {
        if self.coeffs[0].iter().any(|v| *v != 0.0) {
            return Err(Error::Domain("formal exp needs a vanishing q^0 coefficient".into()));
        }
        let mut e = Self::zero(self.l);
        e.coeffs[0] = vec![1.0];
        for ell in 1..=self.l {
            let mut acc = Vec::new();
            for k in 1..=ell {
                let t = poly_mul(&self.coeffs[k], &e.coeffs[ell - k]);
                acc = poly_add(&acc, &poly_scale(&t, k as f64));
            }
            e.coeffs[ell] = poly_scale(&acc, 1.0 / ell as f64);
        }
        Ok(e)
    }

    pub fn eval(&self, z: C64, q2: C64) -> C64 {
        let mut acc = C64::new(0.0, 0.0);
        let mut qp = C64::new(1.0, 0.0);
        for p in &self.coeffs {
            acc += qp * poly_eval(p, z);
            qp *= q2;
        }
        acc
    }
}

/// `log(G^g Π_k (1 - 2q^{2k}(2z²-1) + q^{4k})^g)` as a q²-series: the factor converting
/// `(θ₁²)^{g/2}` into `(sin²)^{g/2}`.
pub fn conversion_log(g: f64, l: usize) -> QSeriesPoly {
    let mut s = QSeriesPoly::zero(l);
    for ell in 1..=l {
        let mut acc: Poly = Vec::new();
        for j in (1..=ell).filter(|j| ell % j == 0) {
            let t = poly_add(&[1.0], &poly_scale(&chebyshev_t(2 * j), 2.0));
            acc = poly_add(&acc, &poly_scale(&t, 1.0 / j as f64));
        }
        s.coeffs[ell] = poly_scale(&acc, -g);
    }
    s
}

/// `W^{(ℓ)}(z) = 8g(g-1)[σ(ℓ) - Σ_{d|ℓ} d T_{2d}(z)]`.
pub fn potential_coeff(ell: usize, g: f64) -> Poly {
    let c = 8.0 * g * (g - 1.0);
    if ell == 0 || c == 0.0 {
        return vec![0.0];
    }
    let mut acc: Poly = vec![divisor_sigma(ell)];
    for d in (1..=ell).filter(|d| ell % d == 0) {
        acc = poly_add(&acc, &poly_scale(&chebyshev_t(2 * d), -(d as f64)));
    }
    poly_scale(&acc, c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeriesBasis {
    Tilde,
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeriesMode {
    Nonstationary,
    Lame,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    ToPlain,
    ToTilde,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesSolution {
    pub params: ModelParams,
    pub l: usize,
    pub basis: SeriesBasis,
    pub d: BTreeMap<(usize, usize), f64>,
    pub e: Vec<f64>,
    pub mode: SeriesMode,
    /// Entries pinned to zero under the resonance convention.
    pub resonances: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DEntry {
    ell: usize,
    m: usize,
    value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ResEntry {
    ell: usize,
    m: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SeriesJson {
    n: i64,
    g: f64,
    kappa: f64,
    #[serde(rename = "L")]
    l: usize,
    basis: SeriesBasis,
    d: Vec<DEntry>,
    #[serde(rename = "E")]
    e: Vec<f64>,
    mode: SeriesMode,
    resonances: Vec<ResEntry>,
}

impl SeriesSolution {
    fn n(&self) -> usize {
        self.params.n as usize
    }

    pub fn get(&self, ell: usize, m: usize) -> f64 {
        self.d.get(&(ell, m)).copied().unwrap_or(0.0)
    }

    /// Coefficients of order `ℓ` as a map `m → d(ℓ,m)`.
    pub fn order(&self, ell: usize) -> BTreeMap<usize, f64> {
        self.d.iter().filter(|((l, _), _)| *l == ell).map(|(&(_, m), &v)| (m, v)).collect()
    }

    /// Polynomial series `Σ_ℓ P^{(ℓ)} q^{2ℓ}` in the stored basis.
    pub fn polynomials(&self) -> Result<QSeriesPoly> {
        let basis = PolyBasis::new(self.params.g, self.n() + 2 * self.l)?;
        let mut s = QSeriesPoly::zero(self.l);
        for ell in 0..=self.l {
            s.coeffs[ell] = basis.combine(&self.order(ell));
        }
        Ok(s)
    }

    /// Banding, parity and normalization; `Err` describes the first violation.
    pub fn check_structure(&self, tol: f64) -> std::result::Result<(), String> {
        let n = self.n();
        if (self.get(0, n) - 1.0).abs() > tol {
            return Err(format!("d(0,n) = {} != 1", self.get(0, n)));
        }
        for (&(ell, m), &v) in &self.d {
            if ell > self.l {
                return Err(format!("entry beyond truncation: ({ell},{m})"));
            }
            let out_of_band = (m as i64 - n as i64).unsigned_abs() as usize > 2 * ell;
            let wrong_parity = (m + n) % 2 == 1;
            if (out_of_band || wrong_parity) && v.abs() > tol {
                return Err(format!("nonzero d({ell},{m}) = {v:e} outside band/parity"));
            }
            if ell == 0 && m != n && v.abs() > tol {
                return Err(format!("nonzero d(0,{m}) = {v:e}"));
            }
        }
        if self.e.len() != self.l + 1 {
            return Err("energy series length mismatch".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let j = SeriesJson {
            n: self.params.n,
            g: self.params.g,
            kappa: self.params.kappa,
            l: self.l,
            basis: self.basis,
            d: self.d.iter().map(|(&(ell, m), &value)| DEntry { ell, m, value }).collect(),
            e: self.e.clone(),
            mode: self.mode,
            resonances: self.resonances.iter().map(|&(ell, m)| ResEntry { ell, m }).collect(),
        };
        serde_json::to_string_pretty(&j).expect("series JSON")
    }

    /// Parse and validate the JSON form.
    pub fn from_json(s: &str) -> Result<Self> {
        let j: SeriesJson = serde_json::from_str(s).map_err(|e| Error::Domain(format!("series JSON: {e}")))?;
        let sol = SeriesSolution {
            params: ModelParams::new(j.n, j.g, j.kappa),
            l: j.l,
            basis: j.basis,
            d: j.d.iter().map(|e| ((e.ell, e.m), e.value)).collect(),
            e: j.e,
            mode: j.mode,
            resonances: j.resonances.iter().map(|r| (r.ell, r.m)).collect(),
        };
        sol.params.validate_basic()?;
        sol.check_structure(1e-9).map_err(Error::Domain)?;
        Ok(sol)
    }
}

/// `(m-n)(n+m+2g) - 4Λℓ = 0`.
pub fn is_resonant(n: i64, m: i64, g: f64, kappa: f64, ell: usize) -> bool {
    let a = (m - n) as f64 * (n + m) as f64 + (m - n) as f64 * 2.0 * g;
    let b = 4.0 * kappa * ell as f64;
    (a - b).abs() <= 1e-12 * (1.0 + a.abs() + b.abs())
}

fn denominator(n: usize, m: usize, g: f64, kappa: f64, ell: usize) -> f64 {
    (m as f64 - n as f64) * (m as f64 + n as f64 + 2.0 * g) - 4.0 * kappa * ell as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SolveOptions {
    /// Pin resonant coefficients to zero instead of failing.
    pub allow_resonance: bool,
}

fn check_mode(params: &ModelParams, mode: SeriesMode) -> Result<()> {
    params.validate_basic()?;
    match mode {
        SeriesMode::Nonstationary if params.kappa == 0.0 => {
            Err(Error::InvalidMode("nonstationary mode needs kappa != 0".into()))
        }
        SeriesMode::Lame if params.kappa != 0.0 => Err(Error::InvalidMode("lame mode needs kappa = 0".into())),
        _ => Ok(()),
    }
}

pub fn solve_series(params: ModelParams, l: usize, mode: SeriesMode) -> Result<SeriesSolution> {
    solve_series_with(params, l, mode, SolveOptions::default())
}

/// Order-by-order recursion in the tilde basis.
pub fn solve_series_with(params: ModelParams, l: usize, mode: SeriesMode, opts: SolveOptions) -> Result<SeriesSolution> {
    check_mode(&params, mode)?;
    let n = params.n as usize;
    let g = params.g;
    let kappa = params.kappa;
    let basis = PolyBasis::new(g, n + 2 * l)?;
    let mut e = energy_series(params.n, g, l);
    let mut orders: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::from([(n, 1.0)])];
    let mut polys: Vec<Poly> = vec![basis.poly(n).clone()];
    let pots: Vec<Poly> = (0..=l).map(|k| potential_coeff(k, g)).collect();
    let mut d = BTreeMap::from([((0usize, n), 1.0)]);
    let mut resonances = Vec::new();
    for ell in 1..=l {
        let mut rhs: Poly = Vec::new();
        for lp in 1..=ell {
            let prev = &polys[ell - lp];
            rhs = poly_add(&rhs, &poly_scale(&poly_mul(&pots[lp], prev), -1.0));
            if !(mode == SeriesMode::Lame && lp == ell) {
                rhs = poly_add(&rhs, &poly_scale(prev, e[lp]));
            }
        }
        let c = basis.expand(&rhs)?;
        let coef = |m: usize| c.get(m).copied().unwrap_or(0.0);
        let lo = n.saturating_sub(2 * ell);
        let mut cur = BTreeMap::new();
        let mut m = if (n - lo) % 2 == 0 { lo } else { lo + 1 };
        while m <= n + 2 * ell {
            if m == n && mode == SeriesMode::Lame {
                // Gauge d(ℓ,n) = 0; the m = n equation fixes E^{(ℓ)}.
                e[ell] = -coef(n);
                cur.insert(m, 0.0);
            } else {
                let den = denominator(n, m, g, kappa, ell);
                if is_resonant(n as i64, m as i64, g, kappa, ell) {
                    if !opts.allow_resonance {
                        return Err(Error::Resonance { ell, m });
                    }
                    resonances.push((ell, m));
                    cur.insert(m, 0.0);
                } else {
                    cur.insert(m, coef(m) / den);
                }
            }
            m += 2;
        }
        for (&m, &v) in &cur {
            d.insert((ell, m), v);
        }
        polys.push(basis.combine(&cur));
        orders.push(cur);
    }
    Ok(SeriesSolution { params, l, basis: SeriesBasis::Tilde, d, e, mode, resonances })
}

/// Convert between the tilde and plain bases by the exact conversion series.
pub fn tilde_to_plain(s: &SeriesSolution, direction: Direction) -> Result<SeriesSolution> {
    let want_source = match direction {
        Direction::ToPlain => SeriesBasis::Tilde,
        Direction::ToTilde => SeriesBasis::Plain,
    };
    if s.basis != want_source {
        return Err(Error::Domain(format!("solution is in {:?} basis", s.basis)));
    }
    let sign = if direction == Direction::ToPlain { -1.0 } else { 1.0 };
    let factor = conversion_log(s.params.g, s.l).scale(sign).exp()?;
    let converted = factor.mul(&s.polynomials()?);
    let n = s.n();
    let basis = PolyBasis::new(s.params.g, n + 2 * s.l)?;
    let mut d = BTreeMap::new();
    for ell in 0..=s.l {
        let c = basis.expand(&converted.coeffs[ell])?;
        let lo = n.saturating_sub(2 * ell);
        for (m, &v) in c.iter().enumerate() {
            let in_band = m >= lo && m <= n + 2 * ell && (m + n) % 2 == 0;
            if in_band || v.abs() > 1e-13 {
                d.insert((ell, m), v);
            }
        }
    }
    let mut out = s.clone();
    out.d = d;
    out.basis = if direction == Direction::ToPlain { SeriesBasis::Plain } else { SeriesBasis::Tilde };
    Ok(out)
}

/// `Σ_ℓ P^{(ℓ)}(cos x) q^{2ℓ}` for a plain-basis solution.
pub fn eval_series_poly(s: &SeriesSolution, x: C64, m: &EllipticModulus) -> Result<C64> {
    if s.basis != SeriesBasis::Plain {
        return Err(Error::Domain("eval_series needs the plain basis".into()));
    }
    let z = x.cos();
    let vals = if s.params.g == 0.0 {
        (0..=s.n() + 2 * s.l).map(|k| (k as f64 * x).cos()).collect::<Vec<_>>()
    } else {
        gegenbauer_all(s.n() + 2 * s.l, s.params.g, z)
    };
    let q2 = m.q2();
    let mut acc = C64::new(0.0, 0.0);
    for (&(ell, mm), &v) in &s.d {
        acc += v * vals[mm] * q2.powu(ell as u32);
    }
    Ok(acc)
}

/// `ψ(x) = (θ₁(x)²)^{g/2} Σ_ℓ P^{(ℓ)}(cos x) q^{2ℓ}`.
pub fn eval_series(s: &SeriesSolution, x: C64, m: &EllipticModulus) -> Result<C64> {
    let p = eval_series_poly(s, x, m)?;
    let t = theta1(x, m);
    let pref = if s.params.g == 0.0 { C64::new(1.0, 0.0) } else { (0.5 * s.params.g * (t * t).ln()).exp() };
    Ok(pref * p)
}

/// Dense Galerkin solve of the same order-by-order systems in `{B_0..B_basis_size}`, with
/// matrix elements by Gauss–Jacobi quadrature and the potential evaluated in cosine form.
pub fn brute_oracle(params: ModelParams, l: usize, basis_size: usize) -> Result<SeriesSolution> {
    let mode = if params.kappa == 0.0 { SeriesMode::Lame } else { SeriesMode::Nonstationary };
    check_mode(&params, mode)?;
    let n = params.n as usize;
    if basis_size <= n + 2 * l + 4 {
        return Err(Error::SingularSystem(format!(
            "basis of size {basis_size} cannot hold degree n + 2L = {} with margin",
            n + 2 * l
        )));
    }
    let g = params.g;
    let kappa = params.kappa;
    let dim = basis_size + 1;
    let nq = dim + l + 4;
    let (nodes, weights) = gauss_jacobi_rule(g, nq)?;
    let vals: Vec<Vec<f64>> = nodes
        .iter()
        .map(|&z| {
            if g == 0.0 {
                let y = z.acos();
                (0..dim).map(|k| (k as f64 * y).cos()).collect()
            } else {
                gegenbauer_all(dim - 1, g, C64::new(z, 0.0)).iter().map(|c| c.re).collect()
            }
        })
        .collect();
    let gram_with = |w: &dyn Fn(f64) -> f64| -> DMatrix<f64> {
        let mut a = DMatrix::zeros(dim, dim);
        for (j, &z) in nodes.iter().enumerate() {
            let wz = weights[j] * w(z);
            for r in 0..dim {
                let vr = vals[j][r] * wz;
                for c in 0..dim {
                    a[(r, c)] += vr * vals[j][c];
                }
            }
        }
        a
    };
    let gram = gram_with(&|_| 1.0);
    let wmats: Vec<DMatrix<f64>> = (0..=l)
        .map(|ell| {
            if ell == 0 || g * (g - 1.0) == 0.0 {
                return DMatrix::zeros(dim, dim);
            }
            let divisors: Vec<usize> = (1..=ell).filter(|d| ell % d == 0).collect();
            let sigma: f64 = divisors.iter().map(|&d| d as f64).sum();
            gram_with(&|z: f64| {
                let y = z.acos();
                let osc: f64 = divisors.iter().map(|&d| d as f64 * (2.0 * d as f64 * y).cos()).sum();
                8.0 * g * (g - 1.0) * (sigma - osc)
            })
        })
        .collect();
    let mut e = energy_series(params.n, g, l);
    let mut sols: Vec<DVector<f64>> = vec![DVector::from_fn(dim, |i, _| if i == n { 1.0 } else { 0.0 })];
    let mut resonances = Vec::new();
    let e0 = (n as f64 + g).powi(2);
    for ell in 1..=l {
        let mut rhs = DVector::zeros(dim);
        for lp in 1..=ell {
            rhs -= &wmats[lp] * &sols[ell - lp];
            if !(mode == SeriesMode::Lame && lp == ell) {
                rhs += e[lp] * (&gram * &sols[ell - lp]);
            }
        }
        let mut a = DMatrix::zeros(dim, dim);
        for c in 0..dim {
            let f = (c as f64 + g).powi(2) - e0 - 4.0 * kappa * ell as f64;
            for r in 0..dim {
                a[(r, c)] = gram[(r, c)] * f;
            }
        }
        if mode == SeriesMode::Lame {
            for r in 0..dim {
                a[(r, n)] = -gram[(r, n)];
            }
        }
        // Columns with a vanishing diagonal factor: harmless if their projection is zero.
        let scale = rhs.amax().max(1e-300);
        for c in 0..dim {
            if mode == SeriesMode::Lame && c == n {
                continue;
            }
            let f = (c as f64 + g).powi(2) - e0 - 4.0 * kappa * ell as f64;
            if f.abs() <= 1e-12 * (1.0 + e0 + (c as f64 + g).powi(2)) {
                let proj = rhs[c] / gram[(c, c)];
                if proj.abs() > 1e-9 * scale {
                    return Err(Error::Resonance { ell, m: c });
                }
                if c <= n + 2 * ell {
                    resonances.push((ell, c));
                }
                for r in 0..dim {
                    a[(r, c)] = 0.0;
                    a[(c, r)] = 0.0;
                }
                a[(c, c)] = 1.0;
                rhs[c] = 0.0;
            }
        }
        let lu = a.lu();
        let u = lu
            .solve(&rhs)
            .ok_or_else(|| Error::SingularSystem(format!("order {ell} system is singular")))?;
        let mut dl = u.clone();
        if mode == SeriesMode::Lame {
            e[ell] = u[n];
            dl[n] = 0.0;
        }
        sols.push(dl);
    }
    let mut d = BTreeMap::new();
    for (ell, v) in sols.iter().enumerate() {
        let lo = n.saturating_sub(2 * ell);
        for m in 0..dim {
            let in_band = m >= lo && m <= n + 2 * ell && (m + n) % 2 == 0;
            if in_band || v[m].abs() > 1e-13 {
                d.insert((ell, m), v[m]);
            }
        }
    }
    Ok(SeriesSolution { params, l, basis: SeriesBasis::Tilde, d, e, mode, resonances })
}
