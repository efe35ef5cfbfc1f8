//! Solutions of the non-stationary Lamé equation
//! `((2i/π)Λ∂_τ - ∂²_x + g(g-1)℘(x) - E) ψ = 0` by kernel-function integral transforms
//! and by q-series perturbation theory, with numerical checks of every identity used.

pub mod cli;
pub mod error;
pub mod kernels;
pub mod qpert;
pub mod specfun;
pub mod transforms;
pub mod verify;

pub use error::{Error, Result};
pub use num_complex::Complex64 as C64;
