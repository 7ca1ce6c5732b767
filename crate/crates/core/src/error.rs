use std::io;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller passed an argument outside the operation's domain.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// An input violated a documented precondition (e.g. a scaled value outside `[0, 1]`).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Stored data is internally inconsistent (index out of range, bad checksum, ...).
    #[error("corrupt data: {0}")]
    Corruption(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// The analytic noise deviation `s_n` is zero, so standardization is undefined.
    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    /// Training produced a non-finite loss.
    #[error("numerical divergence: {0}")]
    Divergence(String),

    #[error("malformed input at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn argument(msg: impl Into<String>) -> Error {
    Error::Argument(msg.into())
}
