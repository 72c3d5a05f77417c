//! Error types shared across the crate.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(thiserror::Error, Debug)]
pub enum Error {
    /// Configuration is internally inconsistent or incompatible with the backbone.
    #[error("config error: {0}")]
    Config(String),

    /// An operation received malformed inputs (shape mismatch, over-length sequence, ...).
    #[error("input error: {0}")]
    Input(String),

    /// A checkpoint or weights file could not be loaded.
    #[error("load error: {0}")]
    Load(String),

    /// Dataset discovery or image decoding failed.
    #[error("data error: {0}")]
    Data(String),

    /// A metric is undefined for the given inputs (e.g. single-class AUROC).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Training diverged (non-finite loss).
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 for config errors, 3 for data errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Input(_) => 2,
            _ => 3,
        }
    }
}
