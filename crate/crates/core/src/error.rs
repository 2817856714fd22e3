use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("initial state outside the state constraint set: {0}")]
    StateOutsideConstraints(String),
    #[error("singular reference: {0}")]
    SingularReference(String),
    #[error("sampling did not terminate: {0}")]
    SamplingExhausted(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("quantization range exceeded for {parameter}: value {value} outside ±{limit}")]
    QuantizationRange {
        parameter: String,
        value: f64,
        limit: f64,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serialization(String),
    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: String, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;
