use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] drsi_tensor::Error),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid channel scheme: {0}")]
    Scheme(String),

    #[error("unknown {kind} {name:?} (known: {known})")]
    Unknown { kind: &'static str, name: String, known: String },

    #[error("weight archive: {0}")]
    Archive(String),

    #[error("weight names do not match the model (missing: [{}], extra: [{}])", missing.join(", "), extra.join(", "))]
    NameMismatch { missing: Vec<String>, extra: Vec<String> },

    #[error("evaluation: {0}")]
    Eval(String),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },

    #[error("{path}: {source}")]
    Toml { path: PathBuf, source: toml::de::Error },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for failures reading or writing files, as opposed to bad content.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
