use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input text")]
    EmptyInput,
    #[error("token id {id} out of range for vocabulary of size {size}")]
    BadToken { id: usize, size: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid vocabulary: {0}")]
    BadVocab(String),
    #[error("invalid schedule: {0}")]
    BadSchedule(String),
    #[error("timestep {t} outside 1..={max}")]
    BadTimestep { t: usize, max: usize },
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("zero-norm vector in cosine similarity")]
    ZeroVector,
    #[error("no candidate produced a valid encoding")]
    NoValidCandidate,
    #[error("no caption has at least {0} tokens")]
    NoNGrams(usize),
    #[error("length mismatch: {hyps} hypotheses vs {refs} reference sets")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("bad magic bytes: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("unsupported format version")]
    BadVersion,
    #[error("file truncated at byte offset {offset}")]
    TruncatedFile { offset: usize },
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error("record {id}: {source}")]
    Record {
        id: String,
        #[source]
        source: Box<Error>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 1 usage, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Record { source, .. } => source.exit_code(),
            Error::BadConfig(_) | Error::BadSchedule(_) | Error::BadTimestep { .. } => 1,
            Error::NonFinite(_) => 3,
            _ => 2,
        }
    }

    pub(crate) fn in_record(self, id: &str) -> Self {
        Error::Record {
            id: id.to_string(),
            source: Box::new(self),
        }
    }
}

pub(crate) fn check_shape(expected: (usize, usize), got: (usize, usize)) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::ShapeMismatch { expected, got })
    }
}
