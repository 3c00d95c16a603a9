use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate normalization bounds: {0} range is empty")]
    DegenerateBounds(&'static str),
    #[error("UE and BS positions coincide; direction is undefined")]
    ZeroVector,
    #[error("invalid geodetic position: {0}")]
    InvalidPosition(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("no candidate chunk size survives the minimum sequence length {min_seq_len}")]
    NoValidChunkSize { min_seq_len: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid dataset: {0}")]
    InvalidData(String),
    #[error("bearing {bearing_deg:.6} deg lies outside the served sector")]
    OutOfSector { bearing_deg: f64 },
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("backward already run on this graph; record a new forward pass")]
    GraphConsumed,
    #[error("evaluation set is empty")]
    EmptySet,
    #[error("sample has no per-beam power vector")]
    MissingPowers,
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("checkpoint payload checksum mismatch")]
    ChecksumMismatch,
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// True for errors caused by the input data or configuration rather than
    /// the environment.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::Io(_))
    }
}
