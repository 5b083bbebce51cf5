use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the library. Variants map onto CLI exit codes
/// (validation 2, numeric divergence 3, I/O 4).
#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric error in {term}: {detail}")]
    Numeric { term: String, detail: String },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("mask unavailable for {0}")]
    MaskUnavailable(String),

    #[error("{path}: {detail}")]
    File { path: PathBuf, detail: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn numeric(term: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            term: term.into(),
            detail: detail.into(),
        }
    }

    pub fn file(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::File {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::Shape(_) | Error::MaskUnavailable(_) => 2,
            Error::Numeric { .. } | Error::Divergence(_) => 3,
            Error::File { .. } | Error::Io(_) | Error::Image(_) | Error::Json(_) => 4,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
