use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by the simulator.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("{op}: index {requested} out of range (limit {limit})")]
    OutOfRange {
        op: &'static str,
        requested: usize,
        limit: usize,
    },

    #[error("basis is not orthonormal (max |QᵀQ - I| = {deviation:e})")]
    NotOrthonormal { deviation: f64 },

    #[error("rank bounds violated: {0}")]
    RankBounds(String),

    #[error("rank-incompatible baseline: {0}")]
    RankIncompatible(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("numerical check failed: {0}")]
    Numerical(String),

    #[error("round {round} aborted: {reason}")]
    RoundAborted { round: usize, reason: String },

    #[error("unknown verification suite `{0}`")]
    UnknownSuite(String),

    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
