use cmt_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CmtError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("geometry: {0}")]
    Geometry(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("config: {0}")]
    Config(String),
    #[error("matching: {0}")]
    Matching(String),
    #[error("non-finite loss on scene `{scene}`: {detail}")]
    NonFiniteLoss { scene: String, detail: String },
    #[error("corrupt data: {0}")]
    Corrupt(String),
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = CmtError> = std::result::Result<T, E>;
