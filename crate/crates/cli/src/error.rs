use std::path::PathBuf;

use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("`{command}` needs `{needs}` to have run on this bundle")]
    StageDependency { command: &'static str, needs: &'static str },

    #[error("bundle already exists at {0} (pass --force to overwrite)")]
    BundleExists(PathBuf),

    #[error("bundle error: {0}")]
    Bundle(String),

    #[error("invalid argument: {0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] scenepos::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}
