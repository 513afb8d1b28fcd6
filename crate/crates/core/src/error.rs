use thiserror::Error;

/// Every failure the pipeline can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparam(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("graph already consumed by a previous backward pass")]
    GraphConsumed,
    #[error("invalid dims: {0}")]
    InvalidDims(String),
    #[error("invalid proportions: {0}")]
    InvalidProportions(String),
    #[error("no frame has its midpoint at or after {window_start_min} min")]
    NoQualifyingFrames { window_start_min: f64 },
    #[error("empty mask")]
    EmptyMask,
    #[error("singular transform (det = {0:e})")]
    SingularTransform(f64),
    #[error("stratum {0} is too small for the requested split")]
    StratumTooSmall(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("invalid data range {0}")]
    InvalidRange(f64),
    #[error("subject {0} is in the held-out set but reached training")]
    SplitLeak(String),
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("missing data for subject {0}")]
    MissingSubjectData(String),
    #[error("bad magic bytes in {0}")]
    BadMagic(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("header mismatch: {0}")]
    HeaderMismatch(String),
    #[error("invalid display window [{min}, {max}]")]
    InvalidWindow { min: f64, max: f64 },
    #[error("unknown command {0:?}")]
    UnknownCommand(String),
    #[error("config parse error: {0}")]
    ConfigParse(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
