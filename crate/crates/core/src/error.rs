use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("graphdepth: {0}")]
    Structural(String),
    #[error("config: {0}")]
    Config(String),
    #[error("domain: {0}")]
    Domain(String),
    #[error("numeric: non-finite value at depth unit {depth}{}", seed.map(|s| format!(" (seed {s})")).unwrap_or_default())]
    Numeric { depth: usize, seed: Option<u64> },
    #[error("capacity: {0}")]
    Capacity(String),
    #[error("precondition: {0}")]
    Precondition(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error("parse: line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
