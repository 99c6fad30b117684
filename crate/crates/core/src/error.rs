use thiserror::Error;

/// Errors produced anywhere in the evaluation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point is behind camera (z = {0})")]
    BehindCamera(f64),

    #[error("invalid depth value {0}")]
    InvalidDepth(f64),

    #[error("log near singularity: rotation angle {0} rad is too close to pi")]
    LogSingularity(f64),

    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("depth image format: {0}")]
    Format(String),

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("too few associated pairs: need at least {needed}, found {found}")]
    TooFewPairs { needed: usize, found: usize },

    #[error("no overlap between model and observations")]
    NoOverlap,

    #[error("mismatched observation sets: {0}")]
    MismatchedObservations(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid pose graph: {0}")]
    InvalidGraph(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }

    pub(crate) fn file(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::File {
            path: path.display().to_string(),
            source,
        }
    }
}
