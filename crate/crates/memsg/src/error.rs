use thiserror::Error;

/// Errors raised by data validation, parsing and file handling.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("vocabulary error: {0}")]
    Vocab(String),
    #[error("invalid scene graph: {0}")]
    Graph(String),
    #[error("invalid recording: {0}")]
    Recording(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
