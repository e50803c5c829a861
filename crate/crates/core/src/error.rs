use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-recoverable rotation: rotation block has rank < 3")]
    NonRecoverableRotation,

    #[error("invalid pose: {0}")]
    InvalidPose(String),

    #[error("degenerate viewpoint: camera center lies inside primitive {0}")]
    DegenerateViewpoint(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("channel mismatch: expected {expected} channels, found {found}")]
    ChannelMismatch { expected: usize, found: usize },

    #[error("no objective: every loss term is disabled")]
    NoObjective,

    #[error("{0}")]
    MissingPrerequisite(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("pose branch has not been trained (stage tag is render-trained)")]
    PoseBranchUntrained,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
