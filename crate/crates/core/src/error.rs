use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the stylization pipeline.
///
/// [`Error::exit_code`] maps each variant onto the command-line contract:
/// validation problems are `1`, runtime and training failures are `2`.
#[derive(Debug, Error)]
pub enum Error {
    /// A manifest or configuration file is missing a field or holds a bad value.
    #[error("load error in {path}: {field}: {reason}")]
    Load {
        path: PathBuf,
        field: String,
        reason: String,
    },
    /// Input data violates an invariant (camera geometry, image sizes, ...).
    #[error("validation error: {0}")]
    Validation(String),
    /// A caller-supplied argument is outside its domain.
    #[error("argument error: {0}")]
    Argument(String),
    /// The requested operation needs data this input does not carry.
    #[error("unsupported: {0}")]
    Unsupported(String),
    /// An operation was called in a state its contract forbids.
    #[error("contract error: {0}")]
    Contract(String),
    /// A named item does not exist.
    #[error("lookup error: {0}")]
    Lookup(String),
    /// Inputs are present but inconsistent with each other.
    #[error("configuration error: {0}")]
    Config(String),
    /// A required artifact of an earlier pipeline stage is absent.
    #[error("precondition failed: {0}")]
    Precondition(String),
    /// A style payload did not match any trained style.
    #[error("unknown style: nearest is '{nearest}' at cosine distance {distance:.4}")]
    UnknownStyle { nearest: String, distance: f64 },
    /// Optimization produced a non-finite loss.
    #[error("training error: non-finite loss at step {step} ({stage})")]
    Training { stage: &'static str, step: usize },
    /// A checkpoint or cache file is malformed.
    #[error("format error: {0}")]
    Format(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn load(path: impl Into<PathBuf>, field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Load {
            path: path.into(),
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Training { .. } | Error::Io { .. } | Error::Format(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
