use maskctl_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// A configuration or spec invariant does not hold.
    #[error("configuration error: {0}")]
    Config(String),
    /// Bad call argument (range, count, step index).
    #[error("argument error: {0}")]
    Argument(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("unknown vocabulary word(s): {}", .0.join(", "))]
    Vocabulary(Vec<String>),
    /// Input data that parsed but violates its format contract.
    #[error("invalid input data: {0}")]
    InvalidData(String),
    #[error("numerical failure at step {step}: {msg}")]
    Numerical { step: usize, msg: String },
    #[error("image codec error: {0}")]
    Codec(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

impl From<png::EncodingError> for CoreError {
    fn from(e: png::EncodingError) -> Self {
        CoreError::Codec(e.to_string())
    }
}

impl From<png::DecodingError> for CoreError {
    fn from(e: png::DecodingError) -> Self {
        CoreError::Codec(e.to_string())
    }
}
