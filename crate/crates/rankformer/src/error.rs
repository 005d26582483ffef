use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("label {value} outside domain 0..={max}")]
    LabelDomain { value: i64, max: u8 },

    #[error("non-finite loss on list {list_id}")]
    NonFinite { list_id: String },

    #[error("all positions masked; attention has no valid target")]
    AllMasked,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
