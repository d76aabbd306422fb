use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("unpaired image: {} has no counterpart", .0.display())]
    UnpairedImage(PathBuf),

    #[error("malformed manifest {}: {reason}", .path.display())]
    MalformedManifest { path: PathBuf, reason: String },

    #[error("corrupted model: {0}")]
    CorruptedModel(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("replay buffer is empty")]
    EmptyBuffer,

    #[error("non-finite value in {part}")]
    NonFinite { part: String },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("config error at `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("image codec: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable code for each failure class.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::MissingFile(_) => "missing-file",
            Error::UnpairedImage(_) => "unpaired-image",
            Error::MalformedManifest { .. } => "malformed-manifest",
            Error::CorruptedModel(_) => "corrupted-model",
            Error::CorruptCheckpoint(_) => "corrupt-checkpoint",
            Error::Format(_) => "format",
            Error::EmptyBuffer => "empty-buffer",
            Error::NonFinite { .. } => "non-finite",
            Error::Diverged { .. } => "diverged",
            Error::Config { .. } => "config",
            Error::Image(_) => "image",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
