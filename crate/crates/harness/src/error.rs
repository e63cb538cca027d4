use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error("non-finite gradient for {0}")]
    NonFiniteGradient(String),
    #[error("checkpoint does not match the corpus: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Core(#[from] ssmg_core::Error),
    #[error(transparent)]
    Data(#[from] ssmg_data::DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub(crate) fn config_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}
