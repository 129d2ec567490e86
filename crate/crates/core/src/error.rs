use std::path::PathBuf;

use thiserror::Error;

use crate::filtering::InspectionVerdict;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("token library manifest missing: {0}")]
    ManifestMissing(PathBuf),

    #[error("token library manifest malformed: {0}")]
    ManifestMalformed(String),

    #[error("embedding file for {token} missing: {path}")]
    EmbeddingFileMissing { token: String, path: PathBuf },

    #[error("embedding file for {token} truncated: expected {expected} bytes, found {found}")]
    EmbeddingTruncated { token: String, expected: u64, found: u64 },

    #[error("dimension mismatch ({context}): expected {expected}, found {found}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("duplicate token string {0}")]
    DuplicateToken(String),

    #[error("duplicate class id {0}")]
    DuplicateClass(u32),

    #[error("duplicate shift name {0}")]
    DuplicateShift(String),

    #[error("invalid prompt template {template:?}: {reason}")]
    InvalidTemplate { template: String, reason: String },

    #[error("invalid value for {field}: {reason}")]
    InvalidArgument { field: String, reason: String },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite {what} at step {step}")]
    NonFinite { step: u64, what: &'static str },

    #[error("backend error: {0}")]
    Backend(String),

    #[error("unknown shift {0}")]
    UnknownShift(String),

    #[error("unknown class {0}")]
    UnknownClass(u32),

    #[error("unknown sample {0}")]
    UnknownSample(String),

    #[error("sample {0} has not been scored")]
    UnscoredSample(String),

    #[error("sample {0} was rejected by the filter")]
    RejectedSample(String),

    #[error("all {0} generations in the batch failed")]
    AllFailed(usize),

    #[error("evaluations span several shifts ({0} and {1})")]
    MixedShifts(String, String),

    #[error("class {0} is eligible on the shift set but has no base predictions")]
    MissingBaseClass(u32),

    #[error("no class has enough kept samples")]
    NoEligibleClasses,

    #[error("slope undefined: {0}")]
    SlopeUndefined(String),

    #[error("shift {shift} is uncalibratable: no grid percentile was accepted")]
    Uncalibratable {
        shift: String,
        verdicts: Vec<InspectionVerdict>,
    },

    #[error("calibration: {0}")]
    Calibration(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
