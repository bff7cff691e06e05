use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Scenario parse or validation failure.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] bdsde_core::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("acceptance failure: {0}")]
    Acceptance(String),
}

impl CliError {
    /// 1 acceptance failure, 2 configuration, 3 numerical or output failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) if e.is_configuration() => 2,
            CliError::Core(_) | CliError::Io { .. } => 3,
            CliError::Acceptance(_) => 1,
        }
    }

    /// Which part of the run failed, for diagnostics.
    pub fn phase(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Core(e) if e.is_configuration() => "setup",
            CliError::Core(_) => "numerics",
            CliError::Io { .. } => "output",
            CliError::Acceptance(_) => "verify",
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Io { path, source }
}
