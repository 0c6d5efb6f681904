use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("resolution error: {0}")]
    Resolution(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("convergence error: {0}")]
    Convergence(String),
    #[error("tolerance error: {0}")]
    Tolerance(String),
}

pub type Result<T> = std::result::Result<T, Error>;
