use std::io;
use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },

    #[error("non-finite activation at layer {layer}")]
    NonFiniteActivation { layer: usize },

    #[error("backward: {0}")]
    Backward(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("version mismatch: found {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("checksum failure for tensor `{0}`")]
    Checksum(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("BN statistics unavailable: {0}")]
    BnStatsUnavailable(String),

    #[error("{stage} diverged at {unit} {index}")]
    Diverged { stage: &'static str, unit: &'static str, index: usize },

    #[error("attack stalled: {0}")]
    Stalled(String),

    #[error("{0}")]
    Failed(String),

    #[error("csv row {row}: {message}")]
    Csv { row: usize, message: String },

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short stable tag used in machine-parsable diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonFinite { .. } | Error::NonFiniteActivation { .. } => "non_finite",
            Error::Backward(_) => "backward",
            Error::Invalid(_) => "invalid",
            Error::Config(_) => "config",
            Error::Format(_) => "format",
            Error::Version { .. } => "version",
            Error::Truncated(_) => "truncated",
            Error::Checksum(_) => "checksum",
            Error::Consistency(_) => "consistency",
            Error::BnStatsUnavailable(_) => "bn_stats",
            Error::Diverged { .. } => "diverged",
            Error::Stalled(_) => "stalled",
            Error::Failed(_) => "failed",
            Error::Csv { .. } => "csv",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    /// Whether the error stems from user-supplied configuration rather than a
    /// runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
