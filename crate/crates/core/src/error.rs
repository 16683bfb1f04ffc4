use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit codes:
/// configuration/shape problems -> 1, numeric failures -> 2,
/// validation failures (oracle disagreement) -> 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("validation failure: {0}")]
    Validation(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) | Error::Io(_) | Error::Csv(_) | Error::Toml(_) => {
                1
            }
            Error::Numeric(_) => 2,
            Error::Validation(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
