use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index out of range in dimension `{dim}`: {index} >= {bound}")]
    Index {
        dim: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("empty tensor")]
    Empty,

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("wrong filter kind: expected {expected}, got {got}")]
    FilterKind {
        expected: &'static str,
        got: &'static str,
    },

    #[error("batch normalization: {0}")]
    BatchNorm(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error("invalid fusion graph: {0}")]
    Graph(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("arithmetic overflow in {0}")]
    Overflow(String),

    #[error("checkpoint not found: {0}")]
    MissingCheckpoint(String),

    #[error("missing parameter `{0}` in checkpoint")]
    MissingParam(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn format_err(what: &'static str, reason: impl Into<String>) -> Error {
    Error::Format {
        what,
        reason: reason.into(),
    }
}
