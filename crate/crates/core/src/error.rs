use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the darslp pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("frame {frame}: shoulder distance {distance:e} is below 1e-8")]
    DegenerateFrame { frame: usize, distance: f64 },

    #[error("non-finite value in {0}")]
    NonFiniteInput(String),

    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("format error in {path} at byte {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("layout hash mismatch: expected {expected}, found {found}")]
    HashMismatch { expected: String, found: String },

    #[error("sequence {id} has {frames} frames, above T_max = {t_max}")]
    SequenceTooLong {
        id: String,
        frames: usize,
        t_max: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training corpus is empty")]
    EmptyCorpus,

    #[error("dataset is empty or has fewer than {required} frames")]
    EmptyDataset { required: usize },

    #[error("batch is empty")]
    EmptyBatch,

    #[error("input point set is empty")]
    EmptyInput,

    #[error("sequence is empty")]
    EmptySequence,

    #[error("row {row} of the padding mask has no real positions")]
    AllMaskedRow { row: usize },

    #[error("requested length {length} outside [1, {t_max}]")]
    LengthOutOfRange { length: usize, t_max: usize },

    #[error("sigma {sigma:e} below floor {floor:e}")]
    DegenerateSigma { sigma: f64, floor: f64 },

    #[error("need at least {required} valid frames, got {found}")]
    TooFewFrames { required: usize, found: usize },

    #[error("projection needs at least {required} frames, got {found}")]
    RankDeficient { required: usize, found: usize },

    #[error("loss diverged ({what}) at epoch {epoch}")]
    DivergenceDetected { what: String, epoch: usize },

    #[error("missing upstream artifact: {0}")]
    MissingUpstream(String),

    #[error("stale artifact: {0}")]
    StaleArtifact(String),

    #[error("workdir is locked by another run: {0}")]
    Locked(PathBuf),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("tensor backend: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("image encoding: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            message: message.into(),
        }
    }

    /// Process exit code: 2 validation, 3 missing upstream, 4 numeric divergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingUpstream(_) => 3,
            Error::DivergenceDetected { .. } => 4,
            Error::Io { .. } | Error::Tensor(_) | Error::Image(_) | Error::Locked(_) => 1,
            _ => 2,
        }
    }
}
