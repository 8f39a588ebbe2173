use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = NarsError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum NarsError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("endpoint out of range: {what} id {id} >= count {count}")]
    OutOfRange { what: String, id: usize, count: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error(
        "{relations} relation types exceed the power-set enumeration cap of {cap}; \
         use random subset sampling instead"
    )]
    TooManyRelations { relations: usize, cap: usize },

    #[error("cannot sample {requested} subsets: only {available} valid subsets exist")]
    NotEnoughSubsets { requested: usize, available: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("checksum mismatch for {0}")]
    Checksum(PathBuf),

    #[error("training diverged at epoch {epoch} (loss is not finite)")]
    Diverged { epoch: usize },

    #[error("memory budget exceeded: {resident} resident bytes > {budget} budget")]
    MemoryBudget { resident: usize, budget: usize },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl NarsError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NarsError::Io { path: path.into(), source }
    }

    pub fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        NarsError::Parse { path: path.into(), line, msg: msg.into() }
    }
}
