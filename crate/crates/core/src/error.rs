use std::path::PathBuf;

/// Errors produced anywhere in the failure-prediction stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor or list shapes do not agree.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A scalar parameter is outside its admissible range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// A network description is invalid or two descriptions disagree.
    #[error("spec error: {0}")]
    Spec(String),

    /// Dataset contents are unusable for the requested operation.
    #[error("data error: {0}")]
    Data(String),

    /// A binary file is malformed.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// An internal invariant was violated.
    #[error("invariant violated: {0}")]
    Invariant(String),

    /// Two reports cannot be compared.
    #[error("comparison error: {0}")]
    Comparison(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
