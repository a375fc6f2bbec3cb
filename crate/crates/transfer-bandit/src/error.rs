//! Error types shared across the crate.

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand dimensions do not match.
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    /// A factorization or solve failed (non-PD matrix, ill-conditioning, non-convergence).
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// An argument violates a documented precondition.
    #[error("invalid input: {0}")]
    Input(String),
    /// A configuration file is malformed; `path` names the offending key.
    #[error("invalid config at `{path}`: {msg}")]
    Config { path: String, msg: String },
    /// A state the algorithm guarantees impossible was reached.
    #[error("internal invariant violated: {0}")]
    InternalInvariant(String),
    /// A checked mathematical invariant failed on observed data.
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
    #[error("io error on `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
