use thiserror::Error;

#[derive(Debug, Error)]
pub enum BotError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("unknown joint mode `{0}`")]
    UnknownMode(String),
    #[error("step tag mismatch: {0}")]
    TagMismatch(String),
    #[error("point outside grid: {0}")]
    OutOfGrid(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, BotError>;
