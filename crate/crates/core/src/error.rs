use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SasError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("format error in {field}: {message}")]
    Format { field: String, message: String },

    #[error("vocabulary error: unknown token {0:?}")]
    Vocabulary(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("checkpoint corrupted: {0}")]
    Corrupt(String),

    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl SasError {
    pub fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        SasError::Format {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SasError::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from configuration rather than data or runtime.
    pub fn is_config(&self) -> bool {
        matches!(self, SasError::Config(_))
    }
}

pub type Result<T, E = SasError> = std::result::Result<T, E>;
