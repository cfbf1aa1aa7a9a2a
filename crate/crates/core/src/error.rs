use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Bad arguments or configuration (ranges, stage tags, empty inputs).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Input files that fail manifest or hash validation.
    #[error("validation failed: {0}")]
    Validation(String),

    /// A numerical property harness found a counterexample.
    #[error("property violated: {0}")]
    Property(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// Process exit code for the CLI: 1 validation, 2 property violation, 3 IO.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Property(_) => 2,
            Error::Io { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
