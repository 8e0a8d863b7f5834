use std::path::PathBuf;

use thiserror::Error;

/// Every failure the pipeline can surface.
///
/// [`Error::code`] maps each variant onto a stable upper-case identifier that
/// the CLI and the Python bindings report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("unknown modality `{0}`")]
    UnknownModality(String),
    #[error("stream lasts {duration_s} s, shorter than one {segment_s} s segment")]
    StreamTooShort { duration_s: f64, segment_s: f64 },
    #[error("modality streams misaligned: {0}")]
    MisalignedStreams(String),
    #[error("{len} samples cannot be split into {parts} equal parts")]
    Indivisible { len: usize, parts: usize },
    #[error("length {len} is not divisible into {k} chunks")]
    IndivisibleLength { len: usize, k: usize },
    #[error("empty collection")]
    EmptyCollection,
    #[error("spectrogram is already normalized")]
    AlreadyNormalized,
    #[error("spectrogram is not normalized")]
    NotNormalized,
    #[error("scaling factor must be positive, got {0}")]
    NonPositiveFactor(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("vector with zero norm in {0}")]
    ZeroVector(String),
    #[error("epoch {epoch} outside [0, {epochs})")]
    EpochOutOfRange { epoch: usize, epochs: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("training diverged at epoch {epoch}")]
    Divergence {
        epoch: usize,
        last_finite: Option<Box<crate::checkpoint::Checkpoint>>,
    },
    #[error("dataset contains a single class")]
    SingleClassDataset,
    #[error("expected a {expected} checkpoint, found {found}")]
    StageMismatch { expected: String, found: String },
    #[error("empty labeled subset")]
    EmptySubset,
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("non-finite activation after {0}")]
    NonFiniteActivation(String),
    #[error("{0} samples are too few to split")]
    TooSmall(usize),
    #[error("class {0} cannot be placed in the training split")]
    ClassUnsplittable(usize),
    #[error("label ratio {0} outside (0, 1]")]
    RatioOutOfRange(f64),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("no dataset for domain {0}")]
    MissingDomain(String),
    #[error("{modality} frequency {freq_hz} Hz is not below Nyquist ({nyquist_hz} Hz)")]
    NyquistViolation {
        modality: String,
        freq_hz: f64,
        nyquist_hz: f64,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("malformed dataset: {0}")]
    Dataset(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            Error::ShapeMismatch(_) => "SHAPE_MISMATCH",
            Error::NonFinite(_) => "NON_FINITE",
            Error::UnknownModality(_) => "UNKNOWN_MODALITY",
            Error::StreamTooShort { .. } => "STREAM_TOO_SHORT",
            Error::MisalignedStreams(_) => "MISALIGNED_STREAMS",
            Error::Indivisible { .. } => "INDIVISIBLE",
            Error::IndivisibleLength { .. } => "INDIVISIBLE_LENGTH",
            Error::EmptyCollection => "EMPTY_COLLECTION",
            Error::AlreadyNormalized => "ALREADY_NORMALIZED",
            Error::NotNormalized => "NOT_NORMALIZED",
            Error::NonPositiveFactor(_) => "NON_POSITIVE_FACTOR",
            Error::InvalidArgument(_) => "INVALID_ARGUMENT",
            Error::ZeroVector(_) => "ZERO_VECTOR",
            Error::EpochOutOfRange { .. } => "EPOCH_OUT_OF_RANGE",
            Error::EmptyDataset => "EMPTY_DATASET",
            Error::Divergence { .. } => "DIVERGENCE",
            Error::SingleClassDataset => "SINGLE_CLASS_DATASET",
            Error::StageMismatch { .. } => "STAGE_MISMATCH",
            Error::EmptySubset => "EMPTY_SUBSET",
            Error::DimMismatch(_) => "DIM_MISMATCH",
            Error::NonFiniteActivation(_) => "NON_FINITE_ACTIVATION",
            Error::TooSmall(_) => "TOO_SMALL",
            Error::ClassUnsplittable(_) => "CLASS_UNSPLITTABLE",
            Error::RatioOutOfRange(_) => "RATIO_OUT_OF_RANGE",
            Error::LengthMismatch(..) => "LENGTH_MISMATCH",
            Error::Empty => "EMPTY",
            Error::MissingDomain(_) => "MISSING_DOMAIN",
            Error::NyquistViolation { .. } => "NYQUIST_VIOLATION",
            Error::Config(_) => "CONFIG_INVALID",
            Error::Checkpoint(_) => "CHECKPOINT_INVALID",
            Error::Dataset(_) => "DATASET_INVALID",
            Error::Io { .. } => "IO",
            Error::Json(_) => "JSON",
            Error::Csv(_) => "CSV",
            Error::Tensor(_) => "TENSOR",
        }
    }
}
