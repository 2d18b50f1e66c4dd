use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    DimensionMismatch { op: &'static str, detail: String },

    #[error("empty distribution")]
    EmptyDistribution,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate training set: {0}")]
    DegenerateTrainingSet(String),

    #[error("unscoreable text: {0:?}")]
    Unscoreable(String),

    #[error("empty source sequence")]
    EmptySource,

    #[error("empty target sequence")]
    EmptyTarget,

    #[error("prefix of length {len} exceeds the supported maximum {max}")]
    PrefixTooLong { len: usize, max: usize },

    #[error("invalid prefix: {0}")]
    InvalidPrefix(String),

    #[error("unembeddable profile {0:?}")]
    UnembeddableProfile(String),

    #[error("undefined similarity: zero-norm vector")]
    UndefinedSimilarity,

    #[error("no selling point has a usable embedding")]
    UnembeddableCandidates,

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dims(op: &'static str, detail: impl Into<String>) -> Self {
        Error::DimensionMismatch {
            op,
            detail: detail.into(),
        }
    }
}
