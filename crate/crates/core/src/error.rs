use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav decode failed for {path}: {message}")]
    Wav { path: PathBuf, message: String },

    #[error("unsupported audio: {0}")]
    UnsupportedAudio(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid mask: {0}")]
    Mask(String),

    #[error("non-finite gradient in tensor `{0}`")]
    NonFiniteGradient(String),

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint tensor `{name}` has shape {found:?}, expected {expected:?}")]
    CheckpointShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("checkpoint is truncated: need {needed} bytes of tensor data, found {found}")]
    CheckpointTruncated { needed: usize, found: usize },

    #[error("unsupported checkpoint version {0}")]
    CheckpointVersion(u32),

    #[error("invalid labels: {0}")]
    Labels(String),

    #[error("score table: {0}")]
    Score(String),

    #[error("empty input: {0}")]
    Empty(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
