use thiserror::Error;

pub type Result<T, E = LvrError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LvrError {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl LvrError {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        LvrError::Dimension { op, detail: detail.into() }
    }

    pub fn format(offset: u64, detail: impl Into<String>) -> Self {
        LvrError::Format { offset, detail: detail.into() }
    }

    /// Machine-readable code printed by the CLI before the error detail.
    pub fn code(&self) -> &'static str {
        match self {
            LvrError::Dimension { .. } => "E_DIMENSION",
            LvrError::Numeric(_) => "E_NUMERIC",
            LvrError::Contract(_) => "E_CONTRACT",
            LvrError::Capacity(_) => "E_CAPACITY",
            LvrError::Format { .. } => "E_FORMAT",
            LvrError::Config(_) => "E_CONFIG",
            LvrError::Generation(_) => "E_GENERATION",
            LvrError::Io(_) => "E_IO",
        }
    }

    /// Process exit code: 2 config, 3 data format, 4 numeric, 5 capacity.
    pub fn exit_code(&self) -> i32 {
        match self {
            LvrError::Config(_) => 2,
            LvrError::Format { .. } | LvrError::Io(_) | LvrError::Generation(_) => 3,
            LvrError::Numeric(_) => 4,
            LvrError::Capacity(_) => 5,
            LvrError::Dimension { .. } | LvrError::Contract(_) => 1,
        }
    }
}
