use alloc::string::String;

/// Errors raised by the reconstruction core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch in {dim}: expected {expected}, got {got}")]
    Shape { op: &'static str, dim: &'static str, expected: usize, got: usize },
    #[error("{op}: expected rank {expected}, got {got}")]
    Rank { op: &'static str, expected: usize, got: usize },
    #[error("{field} = {value} is outside [{lo}, {hi}]")]
    OutOfRange { field: String, value: f64, lo: f64, hi: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("{0}")]
    Degenerate(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, dim: &'static str, expected: usize, got: usize) -> Self {
        Error::Shape { op, dim, expected, got }
    }
}
