use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid record: {0}")]
    InvalidRecord(String),

    #[error("schema mismatch reading {path}: {skipped} of {total} lines skipped (>50%), check the field mapping")]
    SchemaMismatch {
        path: PathBuf,
        skipped: usize,
        total: usize,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("embedding provider error: {0}")]
    Provider(String),

    #[error("embedding cache format error: {0}")]
    CacheFormat(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("generation client error: {0}")]
    GenClient(String),

    #[error("model output parse error: {0}")]
    ModelOutput(String),

    #[error("missing upstream artifact: run the `{stage}` stage first")]
    MissingStage { stage: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
