use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("cannot pack {needed} labelled frames into a sequence of {len}")]
    InfeasiblePacking { needed: usize, len: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Core(#[from] ssmg_core::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

pub(crate) fn invalid(msg: impl Into<String>) -> DataError {
    DataError::Invalid(msg.into())
}
