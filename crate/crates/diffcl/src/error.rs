use std::path::{Path, PathBuf};

/// Everything a command can fail with. Each variant maps to its own exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    /// A file exists but cannot be understood.
    #[error("{}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("no data: {0}")]
    NoData(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } | CliError::Format { .. } => 3,
            CliError::Numeric(_) => 4,
            CliError::NoData(_) => 5,
        }
    }

    pub fn io(path: impl AsRef<Path>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.as_ref().to_path_buf();
        move |source| CliError::Io { path, source }
    }

    pub fn format(path: impl AsRef<Path>, reason: impl ToString) -> CliError {
        CliError::Format { path: path.as_ref().to_path_buf(), reason: reason.to_string() }
    }
}

impl From<diffcl_core::Error> for CliError {
    fn from(e: diffcl_core::Error) -> Self {
        match e {
            diffcl_core::Error::Numeric(m) => CliError::Numeric(m),
            other => CliError::Config(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
