use thiserror::Error;

#[derive(Debug, Error)]
pub enum VdlError {
    #[error("zero vector: norm {norm} below threshold")]
    ZeroVector { norm: f64 },
    #[error("shape mismatch: expected {expected}, got {got} ({context})")]
    ShapeMismatch {
        expected: String,
        got: String,
        context: &'static str,
    },
    #[error("non-finite loss at iteration {iteration} ({term})")]
    NonFiniteLoss {
        iteration: usize,
        term: &'static str,
    },
    #[error("non-finite gradient in {context}")]
    NonFiniteGradient { context: &'static str },
    #[error("empty pool")]
    EmptyPool,
    #[error("value {value} out of range for {what}")]
    RangeError { what: &'static str, value: f64 },
    #[error("degenerate triplet: coincident embeddings at indices ({i}, {j}, {k})")]
    DegenerateTriplet { i: usize, j: usize, k: usize },
    #[error("missing labels: dataset has no true text embeddings")]
    MissingLabels,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}, got {got:?}")]
    BadMagic { expected: [u8; 4], got: [u8; 4] },
    #[error("version mismatch: file version {got}, supported {supported}")]
    VersionMismatch { got: u16, supported: u16 },
    #[error("corrupt length: {context}")]
    CorruptLength { context: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, VdlError>;
