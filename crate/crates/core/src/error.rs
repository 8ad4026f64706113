use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("label out of range for clip `{clip_id}`: {feature} = {value} (expected 1..=10)")]
    LabelRange {
        clip_id: String,
        feature: &'static str,
        value: f64,
    },

    #[error("duplicate clip_id `{0}`")]
    DuplicateClip(String),

    #[error("unknown clip_id `{0}`")]
    UnknownClip(String),

    #[error("infeasible split: {0}")]
    InfeasibleSplit(String),

    #[error("recording too short: {samples} samples, need at least {required}")]
    TooShort { samples: usize, required: usize },

    #[error("not enough items: requested {requested}, available {available}")]
    NotEnough { requested: usize, available: usize },

    #[error("non-finite input sample at index {0}")]
    NonFiniteInput(usize),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("missing upstream artifact: {0}")]
    MissingArtifact(String),

    #[error("wav error on {path}: {message}")]
    Wav { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }
}
