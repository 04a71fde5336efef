use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("manifest not found: {0}")]
    ManifestNotFound(PathBuf),

    #[error("malformed manifest line {line}: {reason}")]
    MalformedManifestLine { line: usize, reason: String },

    #[error("image unreadable for record `{record_id}`: {reason}")]
    ImageUnreadable { record_id: String, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("adapter shape mismatch at layer `{layer}`: {reason}")]
    AdapterShape { layer: String, reason: String },

    #[error("no teacher registered for modality `{modality}`; registered: {registered:?}")]
    TeacherMissing {
        modality: String,
        registered: Vec<String>,
    },

    #[error("batch sampling failed: {0}")]
    Sampling(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("{0}")]
    Other(String),
}

impl Error {
    pub fn other(msg: impl Into<String>) -> Self {
        Error::Other(msg.into())
    }
}
