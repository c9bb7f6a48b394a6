use thiserror::Error;

#[derive(Debug, Error)]
pub enum HiveError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("degenerate softmax row {row}: every entry is masked")]
    DegenerateRow { row: usize },

    #[error("empty loss: every target position is ignored")]
    EmptyLoss,

    #[error("target {target} at position {position} is outside the vocabulary of {vocab}")]
    TargetOutOfRange {
        position: usize,
        target: usize,
        vocab: usize,
    },

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid layer selection: {0}")]
    Selection(String),

    #[error("lookup failed: {0}")]
    Lookup(String),

    #[error("model wiring: {0}")]
    Wiring(String),

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("training diverged at iteration {iter}: loss = {loss}")]
    Divergence { iter: usize, loss: f64 },

    #[error("sequence of length {len} exceeds max_seq {max_seq}")]
    Truncation { len: usize, max_seq: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("ingestion error at line {line}: {msg}")]
    Ingestion { line: usize, msg: String },

    #[error("bad request: {0}")]
    Request(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HiveError>;
