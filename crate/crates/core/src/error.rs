use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{msg} at line {line}")]
    LabelParse { line: usize, msg: String },

    #[error("empty label file")]
    EmptyLabels,

    #[error("track format error: {0}")]
    Format(String),

    #[error("label sequence too short: covers {covered_ms} ms, need {needed_ms} ms")]
    LabelsTooShort { covered_ms: f64, needed_ms: f64 },

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: u64 },

    #[error("manifest error at line {line}: {msg}")]
    Manifest { line: usize, msg: String },

    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
