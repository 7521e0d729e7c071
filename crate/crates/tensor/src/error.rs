use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid argument to {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("tape already consumed by an earlier backward pass")]
    TapeConsumed,

    #[error("function is not deterministic: {0}")]
    NonDeterministic(String),

    #[error("value has no data (symbolic execution)")]
    NoData,

    #[error("{path}: {source}")]
    At { path: String, source: Box<Error> },
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }

    pub fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain { op, detail: detail.into() }
    }

    /// Attaches a layer path, keeping the innermost one if already attached.
    pub fn at(self, path: &str) -> Self {
        match self {
            e @ Error::At { .. } => e,
            e => Error::At { path: path.to_string(), source: Box::new(e) },
        }
    }

    /// The error with any layer path stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::At { source, .. } => source.root(),
            e => e,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
