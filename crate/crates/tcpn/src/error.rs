use thiserror::Error;

#[derive(Debug, Error)]
pub enum TcpnError {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("validation error at utterance {index}: {message}")]
    Validation { index: usize, message: String },

    #[error("degenerate boxes: {0}")]
    DegenerateBoxes(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training aborted: non-finite loss on document {doc_id}")]
    NonFiniteLoss { doc_id: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TcpnError>;
