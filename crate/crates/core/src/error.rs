use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },
    #[error("non-finite gradient from the backward rule of `{op}`")]
    NonFiniteGradient { op: &'static str },
    #[error("backward: {0}")]
    Backward(String),
    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),
    #[error("parameter `{0}` registered twice")]
    DuplicateParameter(String),
    #[error("checkpoint does not match model: {0}")]
    CheckpointMismatch(String),
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error("surface distance undefined: {0} mask is empty")]
    EmptyMask(&'static str),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format { what, detail: detail.into() }
    }
}
