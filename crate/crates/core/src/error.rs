use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("inconsistent feature dimension: row at line {line} uses index {index} but feature_dim is {feature_dim}")]
    InconsistentFeatureDim {
        line: usize,
        index: usize,
        feature_dim: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("list too short for outlier detection: {len} items, need at least 4")]
    ListTooShort { len: usize },

    #[error("non-finite value at item {item}, feature {feature}")]
    NonFinite { item: usize, feature: usize },

    #[error("uncovered signature: no propensity for rank {rank} with signature {signature}")]
    UncoveredSignature { rank: usize, signature: String },

    #[error("propensity table: {0}")]
    Table(String),

    #[error("inconsistent log: non-click with theta*gamma = 1")]
    InconsistentLog,

    #[error("click target unreachable: {sessions} sessions produced {clicks} clicks (target {target})")]
    UnreachableTarget {
        sessions: u64,
        clicks: u64,
        target: u64,
    },

    #[error("no abnormal rankings in log; simulate with p_abnormal > 0 or supply outlier signatures")]
    NoAbnormalRankings,

    #[error("unknown {kind}: {name}")]
    Unknown { kind: &'static str, name: String },

    #[error("model format: {0}")]
    Model(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}
