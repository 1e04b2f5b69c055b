use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("detached input: tensor is not tracked on this tape")]
    DetachedInput,

    #[error("objective must be a scalar, got shape {0:?}")]
    NonScalar(Vec<usize>),

    #[error("diverged gradients: non-finite values in attention input")]
    DivergedGradients,

    #[error("diverged: non-finite loss at step {step}{}", .last_checkpoint.as_ref().map(|p| format!(" (last checkpoint: {})", p.display())).unwrap_or_default())]
    Diverged {
        step: u64,
        last_checkpoint: Option<PathBuf>,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid message: {0}")]
    Message(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
