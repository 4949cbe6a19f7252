use std::path::PathBuf;

/// Errors raised anywhere in the enhancement pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Inconsistent hyperparameters, mismatched widths or malformed config files.
    #[error("configuration error: {0}")]
    Config(String),

    /// An input violates an operation's precondition (divisibility, value range, sizes).
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Tensor shapes that must agree do not.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A NaN/Inf showed up where a finite value is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

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

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Precondition(_) | Error::Shape(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
