//! Crate-wide error type.

use std::path::PathBuf;

/// Errors raised by dataset ingestion, model evaluation and training.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("proposal box without a confidence score ({context})")]
    MissingScore { context: String },

    #[error("degenerate box {0:?}: area rounds to zero in token coordinates")]
    DegenerateBox([f64; 4]),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("dataset {0} has no head in the checkpoint")]
    MissingHead(usize),

    #[error("detection ticket without proposals")]
    MissingProposals,

    #[error("predictions reference unknown keyframes: {0}")]
    UnknownKeyframes(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
