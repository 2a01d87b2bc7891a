use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("label {label} predicted by shard {shard} is out of range for {num_classes} classes")]
    LabelOutOfRange {
        shard: usize,
        label: usize,
        num_classes: usize,
    },

    #[error(
        "enumeration over {impacted} impacted shards exceeds the cap of {cap}; reduce the instance size"
    )]
    Capacity { impacted: usize, cap: usize },

    #[error("no trace entry for sample {sample}, shard {shard}, version {version}")]
    MissingTrace {
        sample: u64,
        shard: usize,
        version: u32,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("internal consistency error: {0}")]
    Internal(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
