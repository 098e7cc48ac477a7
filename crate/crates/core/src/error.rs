use std::path::PathBuf;

use crate::depth_align::AlignmentResult;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported schema_version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Too few usable samples. Alignment failures carry the last result that
    /// still satisfied the inlier floor, when there was one.
    #[error("insufficient data: {message}")]
    InsufficientData { message: String, last_good: Option<Box<AlignmentResult>> },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("validation failed: {message} (objects: {object_ids:?})")]
    Validation { message: String, object_ids: Vec<String> },

    #[error("scene error: {0}")]
    Scene(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn insufficient(message: impl Into<String>) -> Self {
        Error::InsufficientData { message: message.into(), last_good: None }
    }

    pub(crate) fn validation(message: impl Into<String>) -> Self {
        Error::Validation { message: message.into(), object_ids: Vec::new() }
    }

    /// Short machine-readable tag used in CLI diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Format(_) => "format",
            Error::Version { .. } => "version",
            Error::InvalidInput(_) => "invalid_input",
            Error::DegenerateInput(_) => "degenerate_input",
            Error::InsufficientData { .. } => "insufficient_data",
            Error::Numerical(_) => "numerical",
            Error::Validation { .. } => "validation",
            Error::Scene(_) => "scene",
        }
    }
}
