use thiserror::Error;

/// Failures raised by the tensor and differentiation substrate.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("unsupported operation: {0}")]
    Unsupported(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("data mismatch: {0}")]
    Mismatch(String),
    #[error("training failed: {0}")]
    Training(String),
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
