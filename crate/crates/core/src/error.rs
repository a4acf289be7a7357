use thiserror::Error;

/// Errors surfaced across the pipeline. Exit-code mapping for the CLI:
/// config/usage -> 2, data -> 3, model compatibility -> 4.
#[derive(Debug, Error)]
pub enum IcmError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("singular column in adapted weight: {0}")]
    Singularity(String),
    #[error("empty label: {0}")]
    EmptyLabel(String),
    #[error("incompatible model: {0}")]
    IncompatibleModel(String),
    #[error("corrupt stream: {0}")]
    CorruptStream(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, IcmError>;

impl IcmError {
    /// CLI exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            IcmError::Config(_) | IcmError::Argument(_) => 2,
            IcmError::IncompatibleModel(_) | IcmError::CorruptStream(_) => 4,
            _ => 3,
        }
    }
}
