use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unreadable image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("no samples found under {0}")]
    NoSamples(PathBuf),

    #[error("empty class directory {0}")]
    EmptyClass(PathBuf),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("cannot split {samples} samples across {clients} clients")]
    TooFewSamples { samples: usize, clients: usize },

    #[error("non-finite loss at sample {index}")]
    NonFiniteLoss { index: usize },

    #[error("non-finite gradient at attack iteration {iteration}")]
    NonFiniteGradient { iteration: usize },

    #[error("timestep {t} outside 0..={max}")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("detector has no calibration")]
    Uncalibrated,

    #[error("client {client_id}: {source}")]
    Client {
        client_id: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("missing {phase} artifact {path}")]
    MissingArtifact { phase: String, path: PathBuf },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
