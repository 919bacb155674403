use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    /// A statistic is undefined for the given data (e.g. correlation of a constant vector).
    #[error("undefined: {0}")]
    Undefined(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, stable across releases.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Validation(_) => "validation",
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::Undefined(_) => "undefined",
            Error::Consistency(_) => "consistency",
            Error::Input(_) => "input",
            Error::Empty(_) => "empty",
            Error::Diverged(_) => "diverged",
            Error::Checkpoint(_) => "checkpoint",
            Error::Image { .. } => "image",
            Error::Json(_) => "json",
        }
    }
}
