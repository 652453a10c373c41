use std::path::PathBuf;

use thiserror::Error;

use crate::oracles::OracleError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record at {path}:{line}: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("duplicate image id {0:?}")]
    DuplicateId(String),

    #[error("cannot normalize zero vector (record {0:?})")]
    ZeroVector(String),

    #[error("embedding for {0:?} has non-finite components")]
    NonFinite(String),

    #[error("gallery is empty")]
    EmptyGallery,

    #[error(transparent)]
    Oracle(#[from] OracleError),

    #[error("oracle returned an empty response for {0}")]
    EmptyResponse(&'static str),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid fusion policy ({dial_num}, {image_num}): counts must sum to {total}", total = crate::fusion::CANDIDATE_COUNT)]
    PolicyInvalid { dial_num: usize, image_num: usize },

    #[error("target {0:?} is not in the gallery")]
    UnknownTarget(String),

    #[error("description must not be empty")]
    EmptyDescription,

    #[error("simulated sessions require a target image")]
    MissingTarget,

    #[error("session has reached the round cap")]
    SessionComplete,

    #[error("operation not allowed while session is {0}")]
    WrongPhase(&'static str),

    #[error("session {0:?} not found")]
    NotFound(String),

    #[error("corrupt session log {path}: {reason}")]
    CorruptLog { path: PathBuf, reason: String },

    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }
}
