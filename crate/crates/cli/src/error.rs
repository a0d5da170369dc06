use persist_lab::{AccuracyWarning, LabError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("io: {0}")]
    Io(String),
    #[error("config: {0}")]
    Config(String),
    #[error("numeric: {0}")]
    Numeric(LabError),
    #[error("accuracy warning under --strict: {}", .0.iter().map(|w| w.message.as_str()).collect::<Vec<_>>().join("; "))]
    Strict(Vec<AccuracyWarning>),
    #[error("{0} relation(s) failed")]
    RelationFailed(usize),
    /// A sweep member failed with this exit code; no relation failed outright.
    #[error("sweep member {id} failed: {message}")]
    Member { id: String, code: i32, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) => 1,
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Strict(_) => 4,
            CliError::RelationFailed(_) => 5,
            CliError::Member { code, .. } => *code,
        }
    }
}

impl From<LabError> for CliError {
    fn from(e: LabError) -> Self {
        match e {
            LabError::Io(m) => CliError::Io(m),
            LabError::Invalid(m) => CliError::Config(m),
            other => CliError::Numeric(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
