//! Shared error type for the whole crate.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("invalid point: {0}")]
    InvalidPoint(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("manifest entry {entry}: {msg}")]
    Manifest { entry: usize, msg: String },

    #[error("parse error in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint format version {found}, this build reads version {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("evaluation: {0}")]
    Eval(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Coarse category used by the CLI to pick an exit code.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidConfig(_) => "config",
            Error::Io { .. } => "io",
            Error::Parse { .. } | Error::Manifest { .. } => "parse",
            Error::Checkpoint(_) | Error::CheckpointVersion { .. } => "checkpoint",
            Error::InvalidBox(_) | Error::InvalidPoint(_) | Error::Shape(_) => "invariant",
            Error::Empty(_) => "empty",
            Error::Eval(_) => "eval",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
