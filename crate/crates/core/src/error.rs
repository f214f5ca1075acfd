use std::path::PathBuf;

/// Errors raised anywhere in the model stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{}:{line}: malformed JSON: {source}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error("validation failed for {entity}: {reason}")]
    Validation { entity: String, reason: String },

    #[error("{}:{line}: {reason}", path.display())]
    Embedding {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("acoustic sidecar {}: {reason}", path.display())]
    Sidecar { path: PathBuf, reason: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("unknown model variant `{0}`")]
    UnknownVariant(String),

    #[error("model and data are incompatible: {0}")]
    DataMismatch(String),

    #[error("non-finite training loss in batch {batch}")]
    NonFiniteLoss { batch: usize },

    #[error("gradient check: {0}")]
    GradCheck(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
