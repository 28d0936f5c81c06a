use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("graph was freed by a previous backward pass")]
    GraphFreed,
}

impl TensorError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        TensorError::InvalidArgument(msg.into())
    }
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
