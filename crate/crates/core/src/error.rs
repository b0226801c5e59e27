use thiserror::Error;

use crate::judge::JudgeError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid frame sequence: {0}")]
    Frames(String),

    #[error("invalid sample {id}: {reason}")]
    InvalidSample { id: String, reason: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("options share a first token ({0:?})")]
    DuplicateOptionToken(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    Length { expected: usize, actual: usize },

    #[error("invalid pairing of process {kind} with task {task}")]
    InvalidPairing { kind: String, task: String },

    #[error("malformed concatenation: {0}")]
    MalformedConcat(String),

    #[error(transparent)]
    Judge(#[from] JudgeError),

    #[error("bridge: {0}")]
    Bridge(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Unsupported(String),

    #[error("judge unavailable for every group at step {step}; state saved for resume")]
    JudgeOutage { step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
