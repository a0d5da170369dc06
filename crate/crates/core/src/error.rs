use thiserror::Error;

pub type Result<T, E = LabError> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabError {
    #[error("index {index} out of range 0..={max}")]
    Index { index: usize, max: usize },

    #[error("domain error: {0}")]
    Domain(String),

    /// A positive quantity whose natural log exceeds the representable range.
    #[error("scale overflow: log-value {log_value}")]
    Scale { log_value: f64 },

    #[error("matrix not factorizable after jitter {jitter:e}; failing leading minor {minor}")]
    Conditioning { minor: usize, jitter: f64 },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for LabError {
    fn from(e: std::io::Error) -> Self {
        LabError::Io(e.to_string())
    }
}

/// Non-fatal numerical diagnostics. Callers decide whether to escalate.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AccuracyWarning {
    pub source: String,
    pub message: String,
    /// Estimated neglected mass or error bound that triggered the warning.
    pub estimate: f64,
}
