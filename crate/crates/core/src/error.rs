use thiserror::Error;

/// Errors raised across identification, design, bounds and certification.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("grid of {n} points is too small for a certified bound (need at least {required})")]
    GridTooSmall { n: usize, required: usize },

    #[error("singular design: condition number {condition:e} exceeds 1e12")]
    SingularDesign { condition: f64 },

    #[error("infeasible design specification: {0}")]
    InfeasibleSpec(String),

    #[error("solver did not converge after {iterations} iterations (gap {gap:e})")]
    NonConvergence { iterations: usize, gap: f64 },

    #[error("ill-posed feedback loop: {0}")]
    IllPosedLoop(String),

    #[error("pole on the evaluation grid at index {index}")]
    PoleOnGrid { index: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
