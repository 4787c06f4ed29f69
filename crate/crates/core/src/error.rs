use std::path::PathBuf;

use crate::data::BandId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by front-ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset contains no image/mask pairs")]
    EmptyDataset,
    #[error("image {0} has no paired mask")]
    MissingMask(String),
    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },
    #[error("unknown sample id {0}")]
    UnknownId(String),
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },
    #[error("mask {id} contains non-binary value {value}")]
    NonBinaryMask { id: String, value: f64 },
    #[error("sample {id} contains a non-finite pixel in band {band}")]
    NonFinitePixel { id: String, band: usize },
    #[error("missing source band {0}")]
    MissingSourceBand(BandId),
    #[error("invalid band metadata: {0}")]
    InvalidBands(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("cutmix requested but the donor pool is empty")]
    EmptyDonorPool,
    #[error("donor {0} has no landslide pixels")]
    InvalidDonor(String),
    #[error("too few samples: {n} samples for {k} folds")]
    TooFewSamples { n: usize, k: usize },
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        /// Last state whose loss was finite, when one exists.
        last_finite: Option<Box<crate::segnet::Checkpoint>>,
    },
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("fold {fold} failed: {source}")]
    FoldFailed {
        fold: usize,
        completed: Vec<crate::metrics::EvalReport>,
        #[source]
        source: Box<Error>,
    },
    #[error("refusing to overwrite existing {0} (pass overwrite to replace it)")]
    WouldClobber(PathBuf),
    #[error("hdf5 error on {path}: {message}")]
    Hdf5 { path: PathBuf, message: String },
    #[error("png error on {path}: {message}")]
    Png { path: PathBuf, message: String },
    #[error("config parse error: {0}")]
    Config(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl std::fmt::Debug, found: impl std::fmt::Debug) -> Self {
        Error::ShapeMismatch {
            expected: format!("{expected:?}"),
            found: format!("{found:?}"),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidConfig(_)
            | Error::Config(_)
            | Error::WouldClobber(_)
            | Error::TooFewSamples { .. } => ErrorClass::Usage,
            Error::NonFiniteLoss { .. } => ErrorClass::Numeric,
            Error::FoldFailed { source, .. } => source.class(),
            _ => ErrorClass::Data,
        }
    }

    /// Short machine-readable tag for the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::EmptyDataset => "empty_dataset",
            Error::MissingMask(_) => "missing_mask",
            Error::CorruptFile { .. } => "corrupt_file",
            Error::UnknownId(_) => "unknown_id",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::NonBinaryMask { .. } => "non_binary_mask",
            Error::NonFinitePixel { .. } => "non_finite_pixel",
            Error::MissingSourceBand(_) => "missing_source_band",
            Error::InvalidBands(_) => "invalid_bands",
            Error::InvalidConfig(_) => "invalid_config",
            Error::EmptyDonorPool => "empty_donor_pool",
            Error::InvalidDonor(_) => "invalid_donor",
            Error::TooFewSamples { .. } => "too_few_samples",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::IncompatibleCheckpoint(_) => "incompatible_checkpoint",
            Error::FoldFailed { .. } => "fold_failed",
            Error::WouldClobber(_) => "would_clobber",
            Error::Hdf5 { .. } => "hdf5",
            Error::Png { .. } => "png",
            Error::Config(_) => "config",
            Error::Csv(_) => "csv",
        }
    }
}
