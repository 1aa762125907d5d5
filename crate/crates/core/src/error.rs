use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every layer of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short category label used by the CLI when reporting failures.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) | Error::InvalidArgument(_) => "argument",
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::Training(_) => "training",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } | Error::Json(_) => "io",
        }
    }

    /// Process exit code for the category.
    pub fn exit_code(&self) -> u8 {
        match self.category() {
            "config" | "argument" => 2,
            "data" => 3,
            "training" => 4,
            "checkpoint" => 5,
            _ => 6,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
