use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("bad magic in {path}: expected {expected:?}, found {found:?}")]
    BadMagic {
        path: String,
        expected: String,
        found: String,
    },

    #[error("unsupported {format} version {version}")]
    UnsupportedVersion { format: &'static str, version: u8 },

    #[error("malformed {format} data: {reason}")]
    Malformed { format: &'static str, reason: String },

    #[error("alignment mismatch for {what}: expected {expected}, found {found}")]
    Alignment {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav decoding failed: {0}")]
    Wav(#[from] hound::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short stable category name, used as the machine-parsable prefix of CLI errors.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "input",
            Error::Config(_) => "config",
            Error::Shape { .. } => "shape",
            Error::BadMagic { .. } | Error::UnsupportedVersion { .. } | Error::Malformed { .. } => {
                "format"
            }
            Error::Alignment { .. } => "alignment",
            Error::Io { .. } => "io",
            Error::Wav(_) => "wav",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(context: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
