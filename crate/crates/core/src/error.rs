use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("partition error: {0}")]
    Partition(String),

    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("training diverged at round {round}, local step {step}, client {client}: {detail}")]
    Divergence {
        round: usize,
        step: usize,
        client: usize,
        detail: String,
    },

    #[error("ledger inconsistency: {0}")]
    Ledger(String),

    #[error("parse error in {origin}: {reason}")]
    Parse { origin: String, reason: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(origin: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Parse {
            origin: origin.into(),
            reason: reason.into(),
        }
    }
}
