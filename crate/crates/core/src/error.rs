use thiserror::Error;

/// Unified error type for the whole crate.
///
/// `Config` variants indicate the caller handed us an unusable run
/// description (CLI maps these to exit code 2); everything else is a
/// failure while executing a stage (exit code 3).
#[derive(Debug, Error)]
pub enum KdError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: non-finite value at index {index}")]
    NonFinite { op: &'static str, index: usize },

    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("autodiff: {0}")]
    Tape(String),

    #[error("config: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl KdError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        KdError::Shape { op, detail: detail.into() }
    }

    pub fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        KdError::InvalidArgument { op, detail: detail.into() }
    }

    /// Process exit code this error maps to at the CLI boundary.
    pub fn exit_code(&self) -> i32 {
        match self {
            KdError::Config(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, KdError>;
