use std::io;

use thiserror::Error;

/// Errors produced anywhere in the quantization toolkit.
#[derive(Debug, Error)]
pub enum PtqError {
    #[error("empty input")]
    EmptyInput,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("degenerate statistics: {0}")]
    Degenerate(String),

    #[error("no calibration data")]
    NoCalibrationData,

    #[error("incompatible method: {0}")]
    Incompatible(String),

    #[error("invalid graph: {}", .0.join("; "))]
    Graph(Vec<String>),

    #[error("unresolved quantization parameters: {0}")]
    Unresolved(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("unsupported version {found} (expected {expected})")]
    UnsupportedVersion { found: u16, expected: u16 },

    #[error("missing entry: {0}")]
    Missing(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl PtqError {
    /// Short machine-readable category, used by the CLI error listing.
    pub fn kind(&self) -> &'static str {
        match self {
            PtqError::EmptyInput => "empty_input",
            PtqError::InvalidArgument(_) => "invalid_argument",
            PtqError::ShapeMismatch(_) => "shape_mismatch",
            PtqError::NonFinite { .. } => "non_finite",
            PtqError::Degenerate(_) => "degenerate",
            PtqError::NoCalibrationData => "no_calibration_data",
            PtqError::Incompatible(_) => "incompatible",
            PtqError::Graph(_) => "invalid_graph",
            PtqError::Unresolved(_) => "unresolved",
            PtqError::Format(_) => "format",
            PtqError::UnsupportedVersion { .. } => "unsupported_version",
            PtqError::Missing(_) => "missing",
            PtqError::Io(_) => "io",
            PtqError::Csv(_) => "csv",
            PtqError::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, PtqError>;
