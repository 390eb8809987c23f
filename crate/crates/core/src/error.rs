use std::path::PathBuf;

/// Errors produced anywhere in the identification pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// The decoder's message is part of the text, not a chained source.
    #[error("cannot read {path}: {cause}")]
    Wav { path: PathBuf, cause: hound::Error },

    #[error("unsupported audio encoding: {0}")]
    UnsupportedEncoding(String),

    #[error("audio contains no samples")]
    EmptyAudio,

    #[error("too short: {duration:.3} s of audio, need at least {required:.3} s")]
    TooShort { duration: f64, required: f64 },

    #[error("non-finite value in input")]
    NonFinite,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index: {0}")]
    Index(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("checksum mismatch: file is corrupt or truncated")]
    Checksum,

    #[error("unsupported format version {found} (this build reads version {expected})")]
    Version { found: u32, expected: u32 },

    #[error("duplicate {0}")]
    Duplicate(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("annotations line {line}: {msg}")]
    Annotation { line: u64, msg: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
