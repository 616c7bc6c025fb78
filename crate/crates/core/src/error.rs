use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("split has {available} classes but the episode needs {needed}")]
    InsufficientClassPool { needed: usize, available: usize },

    #[error("class {class_id} has {available} usable videos, need {needed}")]
    InsufficientVideos {
        class_id: usize,
        needed: usize,
        available: usize,
    },

    #[error("support videos of class {0} have no ground-truth coverage")]
    EmptySupportMask(usize),

    #[error("prompt of {len} tokens exceeds the limit of {max}")]
    PromptTooLong { len: usize, max: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at step {step} ({stage}): {detail}")]
    Divergence { stage: String, step: usize, detail: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
