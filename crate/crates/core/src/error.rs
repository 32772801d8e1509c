use thiserror::Error;

pub type Result<T> = std::result::Result<T, TgdError>;

#[derive(Debug, Error)]
pub enum TgdError {
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("layer {layer}: {what} mismatch, expected {expected}, found {found}")]
    LayerShape {
        layer: usize,
        what: &'static str,
        expected: String,
        found: String,
    },

    #[error("network hash mismatch: report/masks were computed from {expected}, network is {found}")]
    HashMismatch { expected: String, found: String },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("empty region of interest")]
    EmptyRoi,

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl TgdError {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        TgdError::Shape {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
