use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] cardio_ssl::Error),

    #[error("unknown preset {0:?}; known presets: {1}")]
    UnknownPreset(String, String),

    #[error("config {path}: {msg}")]
    Config { path: PathBuf, msg: String },

    /// An existing output directory was produced by a different configuration.
    #[error("conflict in {path}: {msg}")]
    Conflict { path: PathBuf, msg: String },

    #[error("stored report in {0} does not match the one recomputed from its predictions")]
    Mismatch(PathBuf),

    #[error("plot: {0}")]
    Plot(String),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub(crate) fn config(path: impl Into<PathBuf>, msg: impl ToString) -> Self {
        CliError::Config { path: path.into(), msg: msg.to_string() }
    }

    pub(crate) fn conflict(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        CliError::Conflict { path: path.into(), msg: msg.into() }
    }
}
