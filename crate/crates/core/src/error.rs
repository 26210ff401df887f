use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("softmax row {row} has no unmasked entries")]
    DegenerateRow { row: usize },

    #[error("index {index} out of range for size {limit}")]
    Index { index: usize, limit: usize },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("recurrent state mismatch: {0}")]
    State(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite gradient in {0}")]
    NonFinite(String),

    #[error("format error at line {line}: {msg}")]
    Format { line: usize, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("file truncated while reading {0}")]
    Truncated(&'static str),

    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("unknown tensor {0}")]
    UnknownTensor(String),

    #[error("duplicate tensor {0}")]
    DuplicateTensor(String),

    #[error("missing tensor {0}")]
    MissingTensor(String),

    #[error("bad config block: {0}")]
    Config(String),
}
