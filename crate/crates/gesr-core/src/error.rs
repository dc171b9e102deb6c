use thiserror::Error;

/// Unified error type for the whole crate.
///
/// Every fallible operation returns one of these variants so callers (CLI,
/// FFI, tests) can branch on the failure class without string matching.
#[derive(Debug, Error)]
pub enum GesrError {
    /// Shapes disagree for a numeric operation.
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// Caller-supplied data is malformed (out-of-vocabulary token,
    /// duplicate candidate, non-finite value, label shape, ...).
    #[error("invalid input: {0}")]
    Input(String),

    /// A configuration fails validation before any model is built.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An internal precondition was violated; indicates a bug upstream,
    /// not bad user data.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Evaluation or a finite-difference probe produced NaN/inf.
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    /// The training loop observed a non-finite loss and stopped.
    #[error("training diverged at epoch {epoch}: {detail}")]
    Training { epoch: usize, detail: String },

    /// A metric has no defined value on the given inputs
    /// (e.g. normalized entropy when all labels agree).
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    /// A candidate was requested from the serving cache but is absent.
    #[error("item cache miss for post id {post_id}")]
    CacheMiss { post_id: u32 },

    /// The serving cache was built for a different checkpoint.
    #[error("stale item cache: built for checkpoint {cache_version}, model is {model_version}")]
    StaleCache {
        cache_version: String,
        model_version: String,
    },

    /// A persisted artifact (checkpoint, cache, dataset) is malformed.
    #[error("malformed file {path}: {detail}")]
    Format { path: String, detail: String },

    /// Command-line usage error (unknown flag combination, missing path).
    #[error("usage error: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, GesrError>;

impl GesrError {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        GesrError::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
