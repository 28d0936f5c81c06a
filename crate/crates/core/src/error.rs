use mpa_autodiff::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MpaError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate mask: {0}")]
    DegenerateMask(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}: {detail}")]
    NonFiniteLoss { epoch: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("png encoding failed: {0}")]
    Png(#[from] png::EncodingError),
}

impl MpaError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        MpaError::InvalidArgument(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        MpaError::Config(msg.into())
    }
}

pub type Result<T, E = MpaError> = std::result::Result<T, E>;
