use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid pose: {0}")]
    InvalidPose(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("frame position {0} is already occupied in the cache")]
    PositionCollision(usize),

    #[error("operation would remove every protected anchor: {0}")]
    ProtectedAnchor(String),

    #[error("regime {regime} is not applicable: {reason}")]
    RegimeInapplicable { regime: String, reason: String },

    #[error("malformed graph: {0}")]
    Graph(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
