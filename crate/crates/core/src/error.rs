use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum CrnError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("out of range: {0}")]
    Range(String),

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("constraint violated: {0}")]
    Constraint(String),

    #[error("loss function is not deterministic: {0}")]
    Determinism(String),

    #[error("inconsistent state: {0}")]
    Consistency(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),
}

impl From<serde_json::Error> for CrnError {
    fn from(e: serde_json::Error) -> Self {
        CrnError::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CrnError>;
