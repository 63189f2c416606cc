use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, SparcError>;

#[derive(Debug, Error)]
pub enum SparcError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("sequence of length {len} exceeds max_seq {max}")]
    SequenceOverflow { len: usize, max: usize },

    #[error("prompt {0} is frozen")]
    FrozenPrompt(String),

    #[error("prompt {prompt} is bound to basis {expected}, got {actual}")]
    BasisMismatch {
        prompt: String,
        expected: String,
        actual: String,
    },

    #[error("unknown weight target {0}")]
    UnknownTarget(String),

    #[error("model is {0}")]
    ModelState(&'static str),

    #[error("data error: {0}")]
    Data(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u16, expected: u16 },

    #[error("digest mismatch in {what}: stored {stored:016x}, computed {computed:016x}")]
    Digest {
        what: String,
        stored: u64,
        computed: u64,
    },

    #[error("file truncated while reading {0}")]
    Truncated(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl SparcError {
    /// Process exit code used by the command-line front end.
    ///
    /// 2 is reserved for usage errors, which the argument parser reports itself.
    pub fn exit_code(&self) -> i32 {
        match self {
            SparcError::DegenerateData(_) => 4,
            SparcError::Data(_)
            | SparcError::Format(_)
            | SparcError::Version { .. }
            | SparcError::Digest { .. }
            | SparcError::Truncated(_)
            | SparcError::Json(_)
            | SparcError::Io(_) => 3,
            SparcError::Parameter(_) => 2,
            _ => 1,
        }
    }
}

macro_rules! ensure_dims {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::SparcError::Dimension(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure_dims;
