use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient masks: K={k} but K >= 2*N*T+1 = {required} is needed (T={strength}, N={num_patches})")]
    InsufficientMasks {
        k: usize,
        strength: usize,
        num_patches: usize,
        required: usize,
    },

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("nondeterministic backend refused: {0}")]
    Nondeterministic(String),

    #[error("backend failure on mask {mask_index:?}: {message}")]
    Backend {
        mask_index: Option<usize>,
        message: String,
    },

    #[error("protocol violation (request {id:?}): {message}")]
    Protocol { id: Option<u64>, message: String },

    #[error("backend timed out waiting for request {id}")]
    Timeout { id: u64 },

    #[error("backend returned {actual} for request {id}, expected {expected}")]
    BackendDimension {
        id: u64,
        expected: String,
        actual: String,
    },

    #[error("malformed file {path}: {message}")]
    Format { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("png decode: {0}")]
    PngDecode(#[from] png::DecodingError),

    #[error("png encode: {0}")]
    PngEncode(#[from] png::EncodingError),
}

impl Error {
    pub(crate) fn dims(expected: impl ToString, actual: impl ToString) -> Self {
        Error::DimensionMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn format(path: impl AsRef<std::path::Path>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().display().to_string(),
            message: message.into(),
        }
    }

    /// Process exit code for the command-line front end:
    /// 1 usage/input, 2 verification or audit failure, 3 backend failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InsufficientMasks { .. }
            | Error::Verification(_)
            | Error::Nondeterministic(_) => 2,
            Error::Backend { .. }
            | Error::Protocol { .. }
            | Error::Timeout { .. }
            | Error::BackendDimension { .. } => 3,
            _ => 1,
        }
    }
}
