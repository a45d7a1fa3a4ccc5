use agq_core::Error as CoreError;

/// Failure classes; each maps to a fixed process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("threshold failed: {0}")]
    Threshold(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Io(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Threshold(_) => 4,
        }
    }

    pub fn config(e: CoreError) -> Self {
        CliError::Config(e.to_string())
    }

    /// Store, file or format problems while reading `what`.
    pub fn io(what: &std::path::Path, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", what.display()))
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let msg = e.to_string();
        match e {
            CoreError::Io(_)
            | CoreError::BadMagic { .. }
            | CoreError::UnsupportedVersion(_)
            | CoreError::Truncated { .. }
            | CoreError::TrailingBytes(_)
            | CoreError::UnknownDtype(_)
            | CoreError::DimensionOverflow { .. }
            | CoreError::InvalidName(_)
            | CoreError::DuplicateName(_) => CliError::Io(msg),
            CoreError::InvalidConfig(_)
            | CoreError::InvalidSchedule(_)
            | CoreError::InvalidBits(_)
            | CoreError::UnknownKernel(_) => CliError::Config(msg),
            _ => CliError::Numeric(msg),
        }
    }
}
