use thiserror::Error;

pub type Result<T, E = ArfError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ArfError {
    #[error("vector norm {norm:e} is too small to normalize")]
    ZeroVector { norm: f64 },

    #[error("{context}: expected dimension {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{0}: non-finite value")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no caption available for sample {0}")]
    MissingCaption(u64),

    #[error("no retrieval assignment for sample {0}")]
    MissingAssignment(u64),

    #[error("unknown candidate id {0}")]
    UnknownCandidate(u64),

    #[error("candidate list is empty")]
    EmptyCandidates,

    #[error("k = {k} is out of range for an index of {n} candidates")]
    KOutOfRange { k: usize, n: usize },

    #[error("index was built from checkpoint {index}, but the query checkpoint is {query}")]
    CheckpointMismatch { index: String, query: String },

    #[error("unknown retrieval mode {0:?} (expected v2t, v2v, t2t or t2v)")]
    UnknownMode(String),

    #[error("split {0:?} is empty or absent")]
    EmptySplit(String),

    #[error("finetune set is empty")]
    EmptyFinetuneSet,

    #[error("only {pool} training examples for a batch size of {batch}")]
    PoolTooSmall { pool: usize, batch: usize },

    #[error("expected a checkpoint with provenance {expected}, got {got}")]
    WrongProvenance { expected: String, got: String },

    #[error("parameter shapes are not congruent: {0}")]
    ShapeMismatch(String),

    #[error("mixing coefficient {0} is outside [0, 1]")]
    AlphaOutOfRange(f64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("random rotation of size {0} failed: columns stayed numerically dependent")]
    DependentColumns(usize),

    #[error("bad magic bytes: not an ARFM matrix file")]
    BadMagic,

    #[error("unsupported format version {0}")]
    VersionUnsupported(u64),

    #[error("manifest has {manifest} records but matrix has {matrix} rows")]
    RowCountMismatch { manifest: usize, matrix: usize },

    #[error("missing field `{0}`")]
    MissingField(String),

    #[error("content hash mismatch: stored {stored}, computed {computed}")]
    HashMismatch { stored: String, computed: String },

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl ArfError {
    pub(crate) fn dim(context: &'static str, expected: usize, got: usize) -> Self {
        ArfError::DimensionMismatch {
            context,
            expected,
            got,
        }
    }
}
