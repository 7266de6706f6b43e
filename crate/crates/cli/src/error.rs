use std::path::PathBuf;

/// Errors of the file-facing layer.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] semi_llie_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("malformed archive: {0}")]
    Archive(String),
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("dataset: {0}")]
    Manifest(String),
    #[error("checkpoint was written with a different config:\n{}", .0.join("\n"))]
    ConfigMismatch(Vec<String>),
}

pub type Result<T> = std::result::Result<T, CliError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Io { path, source }
}
