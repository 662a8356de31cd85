use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed {kind} file: {reason}")]
    Format { kind: &'static str, reason: String },

    #[error("cannot normalize: {0}")]
    Normalization(String),

    #[error("training diverged: non-finite {what} in `{array}`")]
    Divergence { array: String, what: &'static str },

    #[error("augmentation drifted: correlation gap {gap:.4} exceeds {limit}")]
    Drift { gap: f64, limit: f64 },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn format_err(kind: &'static str, reason: impl Into<String>) -> Error {
    Error::Format {
        kind,
        reason: reason.into(),
    }
}
