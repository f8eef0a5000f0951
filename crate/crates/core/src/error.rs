use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed record: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("program `{id}`: {message}")]
    InvalidProgram { id: String, message: String },

    #[error("duplicate program id `{0}`")]
    DuplicateId(String),

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("single-class corpus: {0}")]
    SingleClass(String),

    #[error("corpus too small to stratify: {0}")]
    TooSmall(String),

    #[error("vocabulary has no tokens")]
    EmptyVocabulary,

    #[error("invalid token {0:?}: tokens may not contain spaces or line breaks")]
    InvalidToken(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("vocabulary digest mismatch: model expects {expected}, got {actual}")]
    DigestMismatch { expected: String, actual: String },

    #[error("corrupted model file: {0}")]
    Corrupted(String),

    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss in epoch {epoch} on program `{program_id}`")]
    NonFiniteLoss { epoch: usize, program_id: String },

    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerical machinery rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFiniteLoss { .. } | Error::Numeric(_))
    }
}
