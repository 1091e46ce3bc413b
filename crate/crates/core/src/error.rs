use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("dataset is empty after cleaning")]
    EmptyDataset,

    #[error("duplicate bar for ({timestamp}, {asset}) at line {line}")]
    DuplicateKey {
        timestamp: String,
        asset: String,
        line: usize,
    },

    #[error("unknown indicator `{0}`")]
    UnknownIndicator(String),

    #[error("indicator `{indicator}` needs more than {required} bars per asset, got {available}")]
    Warmup {
        indicator: String,
        required: usize,
        available: usize,
    },

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("step called on a finished episode")]
    EpisodeDone,

    #[error("action contains non-finite values")]
    NonFiniteAction,

    #[error("sharpe ratio undefined: returns have zero variance")]
    UndefinedSharpe,

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("protocol violation: {0}")]
    ProtocolViolation(String),

    #[error("signal score {0} outside [1, 5]")]
    ScoreOutOfRange(f64),

    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
