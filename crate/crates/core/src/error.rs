use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {path}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("manifest version {found} is not supported (expected {expected})")]
    ManifestVersionUnsupported { found: u32, expected: u32 },

    #[error("manifest kind is `{found}`, expected `{expected}`")]
    WrongKind { found: String, expected: String },

    #[error("tensor `{tensor}` has unsupported dtype `{dtype}` (only f32le is accepted)")]
    UnsupportedDtype { tensor: String, dtype: String },

    #[error("required tensor `{0}` is missing")]
    MissingTensor(String),

    #[error("tensor `{tensor}`: {detail}")]
    ShapeMismatch { tensor: String, detail: String },

    #[error("tensor `{tensor}` contains a non-finite value at flat index {index}")]
    NonFiniteValue { tensor: String, index: usize },

    #[error("tensor `{tensor}`: {detail}")]
    InvalidAttention { tensor: String, detail: String },

    #[error("eot_norms entry {index} is {value}, norms must be strictly positive")]
    NonPositiveNorm { index: usize, value: f64 },

    #[error("attention length {len} does not match grid {rows}x{cols}")]
    GridMismatch {
        len: usize,
        rows: usize,
        cols: usize,
    },

    #[error("zero-norm vector: {0}")]
    ZeroVector(String),

    #[error("calibrated attention mass {mass:e} is degenerate")]
    DegenerateAttention { mass: f64 },

    #[error("query has no tokens")]
    EmptyQuery,

    #[error("gallery is empty")]
    EmptyGallery,

    #[error("query `{0}` has no relevance judgements")]
    MissingRelevance(String),

    #[error("audit tensors (q_cls, keys, values) are absent; audit skipped")]
    AuditTensorsAbsent,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the filesystem itself rather than of the data.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
