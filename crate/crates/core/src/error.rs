use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum TdgError {
    #[error("line {line}: parse error: {msg}")]
    Parse { line: usize, msg: String },

    #[error("line {line}: integrity error: {msg}")]
    IntegrityAt { line: usize, msg: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("estimation error: {0}")]
    Estimation(String),

    #[error("generator error: {0}")]
    Generator(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("missing dependency: {0}")]
    Dependency(String),

    #[error("stale artifact: {0}")]
    Stale(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = TdgError> = std::result::Result<T, E>;
