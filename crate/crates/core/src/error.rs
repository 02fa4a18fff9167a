use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{path}: {source}")]
    Path {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("audio decode: {0}")]
    Audio(#[from] hound::Error),
}

impl Error {
    /// Stable machine-readable class name, used for CLI exit diagnostics.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::EmptyInput(_) => "empty-input",
            Error::Contract(_) => "contract",
            Error::Format { .. } => "format",
            Error::Version { .. } => "version",
            Error::NonFinite(_) => "non-finite",
            Error::Path { .. } | Error::Io(_) => "io",
            Error::Json(_) => "format",
            Error::Audio(_) => "audio",
        }
    }

    pub(crate) fn at_path(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Path { path, source }
    }
}
