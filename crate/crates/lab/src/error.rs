use std::io;
use std::path::PathBuf;

pub type Result<T, E = LabError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{context}: {message}")]
    Format { context: String, message: String },
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Validation(Vec<String>),
    #[error(transparent)]
    Core(#[from] tailspace_core::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LabError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        LabError::Io { path: path.into(), source }
    }

    pub(crate) fn format(context: impl Into<String>, message: impl Into<String>) -> Self {
        LabError::Format { context: context.into(), message: message.into() }
    }
}
