use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("shape error in {layer}: {msg}")]
    Shape { layer: String, msg: String },
    #[error("solver failure: {msg} (residual {residual:.3e})")]
    Solver { msg: String, residual: f64 },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(layer: &str, msg: impl Into<String>) -> Self {
        Error::Shape { layer: layer.to_string(), msg: msg.into() }
    }

    pub fn solver(msg: impl Into<String>, residual: f64) -> Self {
        Error::Solver { msg: msg.into(), residual }
    }
}
