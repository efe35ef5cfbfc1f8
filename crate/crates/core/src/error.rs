use thiserror::Error;

/// Every failure the library can report. Variants map onto CLI exit codes in `cli`.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("pole: {0}")]
    Pole(String),
    #[error("branch error: {0}")]
    Branch(String),
    #[error("resonance at ell={ell}, m={m}")]
    Resonance { ell: usize, m: usize },
    #[error("invalid mode: {0}")]
    InvalidMode(String),
    #[error("singular system: {0}")]
    SingularSystem(String),
    #[error("quadrature did not converge: drift {drift:e} at N={n}")]
    NonConvergence { drift: f64, n: usize },
    #[error("degree underflow: n={n} - numb={numb} * kappa={kappa} < 0")]
    DegreeUnderflow { n: i64, numb: usize, kappa: f64 },
    #[error("precision budget exceeded: {0}")]
    Precision(String),
    #[error("normalization singular: {0}")]
    Normalization(String),
    #[error("enclosure: {0}")]
    Enclosure(String),
    #[error("polynomial degree {0} exceeds the cap")]
    DegreeCap(usize),
}

pub type Result<T> = std::result::Result<T, Error>;
