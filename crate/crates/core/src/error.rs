use thiserror::Error;

/// Errors raised by the threshold, certificate and experiment routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix has non-finite entries")]
    NonFinite,

    #[error("XX^T coincides with ZZ^T (relative gap {gap:.3e}); the threshold is 1 by convention")]
    Coincident { gap: f64 },

    #[error("zero vector passed where a nonzero one is required")]
    ZeroVector,

    #[error("zero matrix passed where a nonzero one is required")]
    ZeroMatrix,

    #[error("argument {value} outside [0, 1]")]
    OutOfRange { value: f64 },

    #[error("bound denominator 2/C - eps = {denominator:.6} is not positive")]
    NonPositiveDenominator { denominator: f64 },

    #[error("column spaces are aligned (sin theta = 0): no operator with delta < 1 makes X critical")]
    NoCertificate,

    #[error("gradient descent diverged at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("B_eps sampler failed after {attempts} attempts")]
    SamplerFailure { attempts: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
