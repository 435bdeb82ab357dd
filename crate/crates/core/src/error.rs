use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
///
/// Variants are grouped so front ends can map them onto a small set of
/// categories: see [`PtqError::category`].
#[derive(Debug, Error)]
pub enum PtqError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: not a PTQT file")]
    BadMagic { path: PathBuf },

    #[error("{path}: unsupported PTQT version {version}")]
    BadVersion { path: PathBuf, version: u32 },

    #[error("{path}: size mismatch ({detail})")]
    SizeMismatch { path: PathBuf, detail: String },

    #[error("non-finite payload{}", .context.as_deref().map(|c| format!(" in {c}")).unwrap_or_default())]
    NonFinite { context: Option<String> },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse error category, used for exit reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Io,
    Numeric,
}

impl ErrorCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Config => "config",
            ErrorCategory::Io => "io",
            ErrorCategory::Numeric => "numeric",
        }
    }
}

impl PtqError {
    pub fn category(&self) -> ErrorCategory {
        match self {
            PtqError::Io { .. }
            | PtqError::BadMagic { .. }
            | PtqError::BadVersion { .. }
            | PtqError::SizeMismatch { .. }
            | PtqError::Json(_) => ErrorCategory::Io,
            PtqError::Shape(_) | PtqError::Config(_) => ErrorCategory::Config,
            PtqError::NonFinite { .. } | PtqError::Numeric(_) => ErrorCategory::Numeric,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PtqError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, PtqError>;
