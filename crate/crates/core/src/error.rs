use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{what} index {index} out of range (bound {bound})")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid vocabulary: {0}")]
    Vocab(String),
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("invalid input: {0}")]
    Input(String),
    /// Raised by callers' callbacks, e.g. a failed metrics write.
    #[error("{0}")]
    External(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
