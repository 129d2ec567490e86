use std::path::PathBuf;

use shiftkit::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{what} not found: {id}")]
    NotFound { what: &'static str, id: String },
    #[error("invalid {field}: {reason}")]
    Invalid { field: String, reason: String },
    #[error("{0}")]
    Conflict(String),
    #[error("workspace: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("adapter {url}: {reason}")]
    Adapter { url: String, reason: String },
}

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;

impl ServiceError {
    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        ServiceError::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn not_found(what: &'static str, id: impl Into<String>) -> Self {
        ServiceError::NotFound { what, id: id.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ServiceError::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category used in HTTP error bodies.
    pub fn kind(&self) -> &'static str {
        match self {
            ServiceError::Core(e) => match e {
                CoreError::UnknownShift(_) | CoreError::UnknownClass(_) | CoreError::UnknownSample(_) => "not_found",
                CoreError::InvalidArgument { .. }
                | CoreError::InvalidTemplate { .. }
                | CoreError::EmptyInput(_)
                | CoreError::DuplicateClass(_)
                | CoreError::DuplicateShift(_)
                | CoreError::DuplicateToken(_) => "invalid",
                CoreError::Uncalibratable { .. } => "uncalibratable",
                CoreError::Calibration(_) => "conflict",
                _ => "pipeline",
            },
            ServiceError::NotFound { .. } => "not_found",
            ServiceError::Invalid { .. } => "invalid",
            ServiceError::Conflict(_) => "conflict",
            ServiceError::Io { .. } => "io",
            ServiceError::Adapter { .. } => "adapter",
        }
    }

    /// Field named by a validation error, if any.
    pub fn field(&self) -> Option<&str> {
        match self {
            ServiceError::Invalid { field, .. } => Some(field),
            ServiceError::Core(CoreError::InvalidArgument { field, .. }) => Some(field),
            ServiceError::Core(CoreError::UnknownShift(_)) => Some("shift"),
            ServiceError::Core(CoreError::UnknownClass(_)) => Some("class_id"),
            _ => None,
        }
    }
}
