use std::path::PathBuf;

/// Errors produced by every stage of the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("normalization mismatch: expected {expected}, found {found}")]
    Normalization { expected: String, found: String },
    #[error("invalid network spec: {0}")]
    Spec(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("parameter transfer failed for layer `{layer}`: {reason}")]
    Transfer { layer: String, reason: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("spec hash mismatch: checkpoint has {found}, network expects {expected}")]
    SpecHashMismatch { expected: String, found: String },
    #[error("stage pipeline violation: {0}")]
    Pipeline(String),
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("unknown flow provider `{0}`")]
    UnknownFlowProvider(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
