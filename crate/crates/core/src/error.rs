use thiserror::Error;

/// Errors raised by the signal, simulation and experiment layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty frame")]
    EmptyFrame,
    #[error("no echo")]
    NoEcho,
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
    #[error("invalid frame: {0}")]
    InvalidFrame(String),
    #[error("out of range: echo at {round_trip_s} s outside a {span_s} s frame")]
    OutOfRange { round_trip_s: f64, span_s: f64 },
    #[error("root finder did not converge (residual {residual:e})")]
    NonConvergence { residual: f64 },
    #[error("non-physical delta: discriminant {discriminant:e} < 0")]
    NonPhysicalDelta { discriminant: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("toml error: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
