//! Browser bindings: three operations, each taking plain numbers and returning a JSON string
//! for `www/index.html` to render.

use nslame::qpert::{eval_series, solve_series, tilde_to_plain, Direction, SeriesMode};
use nslame::specfun::{energy, EllipticModulus, ModelParams};
use nslame::transforms::{pipeline, PipelineRequest, QuadratureSpec, TransformScheme};
use nslame::C64;
use serde_json::json;
use wasm_bindgen::prelude::*;

fn uniform(count: usize) -> Vec<f64> {
    let pi = std::f64::consts::PI;
    (0..count).map(|k| -pi + 2.0 * pi * (k as f64 + 0.5) / count as f64).collect()
}

/// q, G, η₁/π and `E_{n,g}` for `n = 0..=n_max` at `g`.
pub fn constants_json(tau_re: f64, tau_im: f64, g: f64, n_max: u32) -> Result<String, String> {
    let m = EllipticModulus::new(C64::new(tau_re, tau_im)).map_err(|e| e.to_string())?;
    let energies: Vec<_> = (0..=n_max as i64).map(|n| json!({"n": n, "E": energy(n, g, &m)})).collect();
    Ok(json!({"q": m.q, "G": m.big_g, "eta1_over_pi": m.eta1_over_pi, "g": g, "energies": energies}).to_string())
}

/// Series solution to order `l` and its values on `grid` points at real nome `q`.
pub fn series_json(n: i64, g: f64, kappa: f64, l: usize, q: f64, grid: usize) -> Result<String, String> {
    let s = solve_series(ModelParams::new(n, g, kappa), l, SeriesMode::Nonstationary).map_err(|e| e.to_string())?;
    let p = tilde_to_plain(&s, Direction::ToPlain).map_err(|e| e.to_string())?;
    let m = EllipticModulus::from_real_nome(q).map_err(|e| e.to_string())?;
    let xs = uniform(grid);
    let vals: Vec<C64> = xs.iter().map(|&x| eval_series(&p, C64::new(x, 0.0), &m)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let coeffs: serde_json::Value = serde_json::from_str(&s.to_json()).map_err(|e| e.to_string())?;
    Ok(json!({"solution": coeffs, "x": xs, "psi": vals}).to_string())
}

/// `numb` θ₄-kernel steps from the `cos(ny)` seed at `τ = i·tau_im`, sampled on `grid` points.
pub fn transform_json(n: i64, numb: usize, tau_im: f64, grid: usize) -> Result<String, String> {
    let m = EllipticModulus::new(C64::new(0.0, tau_im)).map_err(|e| e.to_string())?;
    let req = PipelineRequest {
        numb,
        kappa: 1.0,
        g0: 0.0,
        p: 0,
        n,
        scheme: TransformScheme::K,
        quad: QuadratureSpec::default_for(&m),
    };
    let s = pipeline(&req, &m).and_then(|pl| pl.sample(&uniform(grid))).map_err(|e| e.to_string())?;
    serde_json::to_string(&s).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn constants(tau_re: f64, tau_im: f64, g: f64, n_max: u32) -> Result<String, JsError> {
    constants_json(tau_re, tau_im, g, n_max).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn series(n: i32, g: f64, kappa: f64, l: u32, q: f64, grid: u32) -> Result<String, JsError> {
    series_json(n as i64, g, kappa, l as usize, q, grid as usize).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn transform(n: i32, numb: u32, tau_im: f64, grid: u32) -> Result<String, JsError> {
    transform_json(n as i64, numb as usize, tau_im, grid as usize).map_err(|e| JsError::new(&e))
}
