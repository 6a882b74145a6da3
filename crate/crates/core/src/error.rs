use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Caller asked for something the inputs cannot satisfy (bad k, bad config).
    Usage,
    /// Reading or parsing an input failed.
    Input,
    /// Inputs parsed but violate a numeric or structural invariant.
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{context}: {message}")]
    Parse { context: String, message: String },

    #[error("duplicate token surface {surface:?}")]
    DuplicateSurface { surface: String },

    #[error("empty token surface at id {id}")]
    EmptySurface { id: u32 },

    #[error("vocabulary ids are not dense: {0}")]
    NonDenseIds(String),

    #[error("malformed checkpoint header: {0}")]
    MalformedHeader(String),

    #[error("unsupported dtype {0:?}")]
    UnsupportedDtype(String),

    #[error("tensor {name:?} overlaps or leaves a gap in the payload at byte {offset}")]
    BadOffsets { name: String, offset: u64 },

    #[error("truncated checkpoint: need {expected} bytes, file has {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("tensor {0:?} not found")]
    MissingTensor(String),

    #[error("duplicate tensor name {0:?}")]
    DuplicateTensor(String),

    #[error("tensor {name:?} has rank {rank}, expected 2")]
    Rank { name: String, rank: usize },

    #[error("tensor {name:?}: {len} values do not match shape {shape:?}")]
    ValueCount {
        name: String,
        len: usize,
        shape: Vec<usize>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("no embedding tensor found among {0:?}")]
    EmbeddingNotFound(Vec<String>),

    #[error("ambiguous embedding tensor, candidates: {0:?}")]
    AmbiguousEmbedding(Vec<String>),

    #[error("row {index} out of range for a matrix with {rows} rows")]
    OutOfRange { index: usize, rows: usize },

    #[error("k = {k} is too large for {rows} rows")]
    KTooLarge { k: usize, rows: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("source and target vocabularies share no tokens")]
    EmptyOverlap,

    #[error("no usable similarity weights for missing token {0}")]
    DegenerateWeights(u32),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("ratio denominator is zero")]
    ZeroDenominator,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        use Error::*;
        match self {
            KTooLarge { .. } | Config(_) | OutOfRange { .. } => ErrorKind::Usage,
            Io { .. }
            | Parse { .. }
            | DuplicateSurface { .. }
            | EmptySurface { .. }
            | NonDenseIds(_)
            | MalformedHeader(_)
            | UnsupportedDtype(_)
            | BadOffsets { .. }
            | Truncated { .. }
            | MissingTensor(_)
            | DuplicateTensor(_)
            | EmbeddingNotFound(_)
            | AmbiguousEmbedding(_) => ErrorKind::Input,
            Rank { .. }
            | ValueCount { .. }
            | NonFinite(_)
            | ShapeMismatch(_)
            | EmptyOverlap
            | DegenerateWeights(_)
            | ZeroDenominator => ErrorKind::Numeric,
        }
    }
}
