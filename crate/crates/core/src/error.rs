use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("timestep {t} outside [{lo}, {hi}]")]
    Timestep { t: usize, lo: usize, hi: usize },

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("training did not converge: final loss {loss} is not below {bound}")]
    NotConverged { loss: f64, bound: f64 },

    #[error("attack produced a non-finite sample at restart {restart}, timestep {t}")]
    AttackNonFinite { restart: usize, t: usize },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint kind is `{found}`, expected `{expected}`")]
    CheckpointKind { found: String, expected: String },

    #[error("architecture mismatch: {0}")]
    Architecture(String),

    #[error("insufficient samples for class {class}: {count} < {required}")]
    InsufficientSamples {
        class: usize,
        count: usize,
        required: usize,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
