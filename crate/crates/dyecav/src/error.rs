use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("invalid value for `{key}`: {msg}")]
    Invalid { key: String, msg: String },
    #[error("missing required keys: {}", .0.join(", "))]
    Missing(Vec<String>),
    #[error("unknown key `{0}`")]
    Unknown(String),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("unknown preset `{0}`")]
    Preset(String),
    #[error("io error on {path}: {msg}")]
    Io { path: String, msg: String },
}

impl ConfigError {
    pub fn invalid(key: &str, msg: impl Into<String>) -> Self {
        Self::Invalid { key: key.to_string(), msg: msg.into() }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("step size underflow at t = {t:e} (h = {h:e})")]
    StepUnderflow { t: f64, h: f64, state: Vec<f64> },
    #[error("state left the physical box at t = {t:e}: {what}")]
    Validity { t: f64, what: String },
    #[error("singular linear system: {0}")]
    Singular(String),
    #[error("steady state not found at P = {p:e} (residual {residual:e})")]
    NoSteadyState { p: f64, residual: f64, state: Vec<f64> },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("fit error: {0}")]
    Fit(String),
}
