use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Kernel(#[from] numkernel::KernelError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },

    #[error("{what}: shape {got:?} does not match expected {expected:?}")]
    Shape { what: &'static str, expected: Vec<usize>, got: Vec<usize> },

    #[error("sequence file: {0}")]
    Format(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> CoreError {
    CoreError::Invalid { op, msg: msg.into() }
}
