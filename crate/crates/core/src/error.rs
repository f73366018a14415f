use thiserror::Error;

/// Errors produced by the numerical core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not positive definite: pivot {index} is {pivot:e}")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("matrix is not positive semidefinite: smallest eigenvalue {eigenvalue:e}")]
    NotPositiveSemidefinite { eigenvalue: f64 },

    #[error(
        "hermitian eigensolver did not converge after {sweeps} sweeps \
         (off-diagonal norm {off_norm:e}, frobenius norm {frobenius:e}, size {size})"
    )]
    EigenNoConvergence {
        sweeps: usize,
        off_norm: f64,
        frobenius: f64,
        size: usize,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite loss at batch {batch}: {detail}")]
    NonFiniteLoss { batch: usize, detail: String },

    #[error("stale activation cache: {0}")]
    StaleCache(String),

    #[error("malformed {what} at byte offset {offset}: {detail}")]
    Format {
        what: &'static str,
        offset: u64,
        detail: String,
    },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
