use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("zero vector")]
    ZeroVector,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// A backend call failed after exhausting its retries.
    #[error("backend {backend} failed after {attempts} attempt(s): {reason}")]
    Backend {
        backend: String,
        attempts: usize,
        reason: String,
    },

    /// Every backend in a fallback chain refused or failed for this video.
    #[error("all caption backends exhausted for video {video_id}: {reason}")]
    BackendsExhausted { video_id: String, reason: String },

    #[error("short caption list for video {video_id}: wanted {wanted}, got {got}")]
    ShortCaptionList {
        video_id: String,
        wanted: usize,
        got: usize,
    },

    #[error("missing prerequisite {artifact}: run `{producer}` first")]
    MissingPrerequisite { artifact: String, producer: String },

    #[error("cache conflict for {0}: existing entry differs")]
    CacheConflict(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Backend { .. } | Error::BackendsExhausted { .. } | Error::ShortCaptionList { .. } => 3,
            Error::MissingPrerequisite { .. } => 4,
            Error::Io { .. } => 1,
            _ => 2,
        }
    }
}
