use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("invalid RoPE base {0}: must be > 1")]
    InvalidBase(f64),
    #[error("causality violated: query position {query} precedes key position {key}")]
    Causality { query: u64, key: u64 },
    #[error("format error: {0}")]
    Format(String),
    #[error("length error: {0}")]
    Length(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("ordering error: position {position} does not follow {last}")]
    Ordering { position: u64, last: u64 },
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("size limit exceeded: {0}")]
    SizeLimit(String),
    #[error("generation error: {0}")]
    Generation(String),
}

impl Error {
    /// Stable short name, used for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidDimension(_) => "invalid-dimension",
            Error::InvalidBase(_) => "invalid-base",
            Error::Causality { .. } => "causality",
            Error::Format(_) => "format",
            Error::Length(_) => "length",
            Error::EmptyInput(_) => "empty-input",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::InsufficientData(_) => "insufficient-data",
            Error::Shape(_) => "shape",
            Error::Ordering { .. } => "ordering",
            Error::Configuration(_) => "configuration",
            Error::SizeLimit(_) => "size-limit",
            Error::Generation(_) => "generation",
        }
    }
}
