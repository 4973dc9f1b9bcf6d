use std::path::PathBuf;

/// Errors raised by the retrieval and training library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },

    #[error("negative weight {value} at coordinate {index}")]
    NegativeWeight { index: usize, value: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("model is frozen and cannot be updated")]
    Frozen,

    #[error("duplicate id {0:?}")]
    DuplicateId(String),

    #[error("unknown id {0:?}")]
    UnknownId(String),

    #[error("missing rewrite for teacher {teacher:?} (source {source_tag:?})")]
    MissingRewrite { teacher: String, source_tag: String },

    #[error("missing teacher score for document {0:?}")]
    MissingTeacherScore(String),

    #[error("turn {turn} out of range for conversation with {len} turns")]
    TurnOutOfRange { turn: usize, len: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("missing input file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("manifest {}: {message}", path.display())]
    Manifest { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
