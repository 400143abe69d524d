use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] histdr::Error),

    #[error("stale artifact {}: {reason}; re-run the upstream command or pass --force", path.display())]
    Stale { path: PathBuf, reason: String },

    #[error("{0}")]
    Locked(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }

    /// 0 success, 1 validation or config, 2 missing artifact, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(histdr::Error::MissingArtifact(_)) => 2,
            CliError::Core(histdr::Error::Numerical(_)) => 3,
            _ => 1,
        }
    }
}
