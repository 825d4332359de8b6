//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid correlation matrix: {0}")]
    InvalidCorrelation(String),

    #[error("dimension {dim} too large for {what} (maximum {max})")]
    DimensionTooLarge {
        what: &'static str,
        dim: usize,
        max: usize,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("projection matrix Q is singular even after ridge regularization")]
    SingularQ,

    #[error("nonpositive conditional variance {0:.3e}; correlation structure is near-degenerate")]
    NonPositiveConditionalVariance(f64),

    #[error("truncated region carries degenerate probability mass {0:.3e}")]
    DegenerateMass(f64),

    #[error("nonpositive probability {0:.3e} passed to log-likelihood")]
    NonPositiveProbability(f64),

    #[error("alternative index {index} out of range 1..={count}")]
    AlternativeOutOfRange { index: usize, count: usize },

    #[error("covariance matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("configuration invalid:\n{}", .0.join("\n"))]
    ConfigValidation(Vec<String>),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv parse error at {path}:{line}: {msg}")]
    CsvParse {
        path: String,
        line: usize,
        msg: String,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
