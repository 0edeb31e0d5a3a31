use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Inputs are individually valid but do not fit together (length or shape mismatch).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A normalisation baseline is zero, so the cost is undefined.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("exhaustive search refused: (2pi/r)^(N-1) = {predicted} evaluations exceeds guard {guard}")]
    GridGuard { predicted: u128, guard: u64 },

    #[error("training failed: {0}")]
    Training(String),

    /// A stored artifact was produced under a different configuration.
    #[error("incompatible artifact: {0}")]
    Incompatible(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
