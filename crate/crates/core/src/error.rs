use std::path::PathBuf;

/// Errors surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("modality `{0}` is missing")]
    MissingModality(String),
    #[error("modality `{modality}`: class value {value} outside [0, {classes})")]
    ClassOutOfRange {
        modality: String,
        value: usize,
        classes: usize,
    },
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("invalid conditioning spec: {0}")]
    InvalidSpec(String),
    #[error("non-finite value in `{name}`")]
    NonFinite { name: String },
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("degenerate statistics: {0}")]
    Degenerate(String),
    #[error("{what} hash mismatch: expected {expected}, found {found}")]
    HashMismatch {
        what: String,
        expected: String,
        found: String,
    },
    #[error("malformed artifact {path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("empty input: {0}")]
    Empty(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
