use std::path::PathBuf;

use crate::training::LossTrajectory;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("duplicate observation for series `{id}` at `{ds}`")]
    Duplicate { id: String, ds: String },

    #[error("series of length {length} is too short for horizon {horizon} (needs {needed})")]
    SeriesTooShort {
        length: usize,
        horizon: usize,
        needed: usize,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("loss mask selects no terms")]
    EmptyLoss,

    #[error("sampler error: {0}")]
    Sampler(String),

    #[error("training diverged at step {step}")]
    Divergence {
        step: usize,
        trajectory: Box<LossTrajectory>,
    },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
