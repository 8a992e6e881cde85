use thiserror::Error;

/// Errors produced by the simulator library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    DimensionMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty shard")]
    EmptyShard,
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch index {index} out of range for shard of size {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error(
        "packing infeasible: accepted {accepted} of {requested} points within {attempts} attempts"
    )]
    PackingInfeasible {
        accepted: usize,
        requested: usize,
        attempts: usize,
    },
    #[error("need at least {needed} examples, got {got}")]
    TooFewExamples { needed: usize, got: usize },
    #[error("dataset has no class labels")]
    LabelsAbsent,
    #[error("cannot cut {n} examples into {chunks} label chunks")]
    Unchunkable { n: usize, chunks: usize },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("training diverged: global loss {loss} at round {round}; try a smaller step size")]
    Diverged { round: usize, loss: f64 },
    #[error("idx: wrong magic number {found:#010x}, expected {expected:#010x}")]
    IdxWrongMagic { found: u32, expected: u32 },
    #[error("idx: truncated file {path}: {detail}")]
    IdxTruncated { path: String, detail: String },
    #[error("idx: {images} images but {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },
    #[error("fewer than {needed} usable points for rate fit (got {got})")]
    NotEnoughPoints { needed: usize, got: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
