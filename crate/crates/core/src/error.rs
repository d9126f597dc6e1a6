use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor: vector norm below 1e-12 cannot be normalized")]
    ZeroVector,

    #[error("tensor: shape mismatch: {0}")]
    Shape(String),

    #[error("tensor: temperature must be positive, got {0}")]
    InvalidTemperature(f64),

    #[error("losses: degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("losses: invalid loss weights: {0}")]
    InvalidWeights(String),

    #[error("numerical instability: {0}")]
    NumericalInstability(String),

    #[error("encoder: incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("data: {path}:{line}: parse error: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("data: {path}:{line}: unresolved reference to `{id}`")]
    Reference { path: PathBuf, line: usize, id: String },

    #[error("data: degenerate dataset: {0}")]
    DegenerateDataset(String),

    #[error("data: insufficient data for language `{lang}`: need {needed}, have {available}")]
    InsufficientData {
        lang: String,
        needed: usize,
        available: usize,
    },

    #[error("mining: candidate pool for example `{example}` has {pool} items, need {needed}")]
    PoolTooSmall {
        example: String,
        pool: usize,
        needed: usize,
    },

    #[error("training: invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("eval: query `{0}` has no qrels entry")]
    MissingQrels(String),

    #[error("config: {0}")]
    Config(String),

    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
