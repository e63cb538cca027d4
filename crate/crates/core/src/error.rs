use thiserror::Error;

/// Errors raised by tensor operations, the tape and model plumbing.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss does not depend on any differentiable leaf")]
    DetachedLoss,

    #[error("backward already ran on this tape; reset it before differentiating again")]
    BackwardTwice,

    #[error("variable does not belong to this tape")]
    ForeignVar,

    #[error("activation budget exceeded: {requested} scalars requested with {retained} retained, cap {cap}")]
    OutOfMemory {
        requested: usize,
        retained: usize,
        cap: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
