use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a {expected} file (bad magic bytes)")]
    MagicMismatch { expected: &'static str },
    #[error("truncated payload: header declares {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint mismatch: {0}")]
    VersionMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("unknown band {0:?}")]
    UnknownBand(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("crop of {crop}x{crop} does not fit a {rows}x{cols} scene")]
    CropLargerThanScene { crop: usize, rows: usize, cols: usize },
    #[error("dimensions {rows}x{cols} not divisible by factor {factor}")]
    NonDivisibleDims { rows: usize, cols: usize, factor: usize },
    #[error("bad scene dimensions: {0}")]
    BadDims(String),
    #[error("split fractions must be nonnegative and sum to 1, got {0:?}")]
    BadFractions([f64; 3]),
    #[error("activation taps are empty")]
    EmptyTaps,
    #[error("unknown conditioning mode {0:?}")]
    UnknownConditioningMode(String),
    #[error("unknown attention variant {0:?}")]
    UnknownAttentionVariant(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss at step {step}: {report}")]
    NonFiniteLoss { step: u64, report: String },
    #[error("ground truth has zero mean signal")]
    ZeroMeanSignal,
    #[error("all pixels have zero-norm spectral vectors")]
    AllPixelsDegenerate,
    #[error("pixels left uncovered by the tile plan")]
    UncoveredPixels,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },
    #[error("png encoding failed: {0}")]
    Png(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
