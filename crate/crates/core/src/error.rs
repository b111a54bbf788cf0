use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the pipeline and its stages.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("point ({x}, {y}) is outside the grid bounds")]
    OutOfBounds { x: f64, y: f64 },

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("missing column `{column}` in {path}")]
    MissingColumn { path: PathBuf, column: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("kriging system is numerically singular")]
    SingularSystem,

    #[error("dangling reference: {kind} `{key}` not found")]
    DanglingKey { kind: &'static str, key: String },

    #[error("duplicate stop_id `{0}` while writing feed")]
    DuplicateStopId(String),

    #[error("missing upstream artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Csv {
        context: String,
        #[source]
        source: csv::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn csv(context: impl Into<String>, source: csv::Error) -> Self {
        Error::Csv {
            context: context.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
