use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Core(#[from] cbfrrt::Error),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },

    #[error("serialization: {0}")]
    Serialize(#[from] serde_json::Error),

    #[error("problem {id}: {what}")]
    Problem { id: usize, what: String },

    #[error("method {method} needs a checkpoint")]
    MissingCheckpoint { method: String },

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T, E = BenchError> = std::result::Result<T, E>;

pub(crate) fn read(path: &std::path::Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| BenchError::Io { path: path.into(), source })
}

pub(crate) fn write(path: &std::path::Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| BenchError::Io { path: dir.into(), source })?;
    }
    std::fs::write(path, contents).map_err(|source| BenchError::Io { path: path.into(), source })
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> Result<T> {
    serde_json::from_str(&read(path)?).map_err(|source| BenchError::Json { path: path.into(), source })
}

/// Pretty JSON with a trailing newline.
pub(crate) fn to_json<T: serde::Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

pub(crate) fn missing(path: &Path) -> BenchError {
    BenchError::Io { path: path.to_path_buf(), source: std::io::Error::from(std::io::ErrorKind::NotFound) }
}
