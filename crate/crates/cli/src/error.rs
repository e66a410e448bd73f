use std::fmt;
use std::process::ExitCode;

use pocketllm::metrics::MetricsError;
use pocketllm::tensor_store::StoreError;
use pocketllm::{CompressError, FormatError};

/// Process exit statuses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Config = 2,
    Data = 3,
    Diverged = 4,
    Corrupt = 5,
}

#[derive(Debug)]
pub struct CliError {
    pub status: Status,
    pub message: String,
}

impl CliError {
    pub fn new(status: Status, message: impl Into<String>) -> Self {
        CliError { status, message: message.into() }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.status as u8)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        let status = match e {
            StoreError::NotDivisible { .. } | StoreError::UnknownLayer(_) => Status::Config,
            _ => Status::Data,
        };
        CliError::new(status, e.to_string())
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        let status = match e {
            FormatError::Io { .. } => Status::Data,
            _ => Status::Corrupt,
        };
        CliError::new(status, e.to_string())
    }
}

impl From<CompressError> for CliError {
    fn from(e: CompressError) -> Self {
        match e {
            CompressError::Store(s) => s.into(),
            CompressError::Diverged { .. } => CliError::new(Status::Diverged, e.to_string()),
            CompressError::IndexOutOfRange { .. } => CliError::new(Status::Corrupt, e.to_string()),
            _ => CliError::new(Status::Config, e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        let status = match e {
            MetricsError::Shape(_) => Status::Data,
            _ => Status::Config,
        };
        CliError::new(status, e.to_string())
    }
}

pub fn io_error(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::new(Status::Data, format!("{}: {e}", path.display()))
}
