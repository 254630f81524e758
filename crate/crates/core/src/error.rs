use std::path::PathBuf;

use thiserror::Error;

/// Everything that can go wrong inside the engine.
#[derive(Debug, Error)]
pub enum PlabError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("numeric overflow: {0}")]
    NumericOverflow(String),
    #[error("state error: {0}")]
    State(String),
    #[error("inconsistent sites: {0}")]
    InconsistentSites(String),
    #[error("empty window: no steps accumulated since the last drain")]
    EmptyWindow,
    #[error("invalid threshold: tau must be >= 0, got {0}")]
    InvalidThreshold(f64),
    #[error("too few sites: quadrant analysis needs at least 4, got {0}")]
    TooFewSites(usize),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("training not started: {0}")]
    NotStarted(String),
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PlabError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PlabError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        PlabError::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, PlabError>;
