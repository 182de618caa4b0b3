//! CLI-level errors and their process exit codes.
//!
//! Exit codes: 0 success, 2 configuration error, 3 missing upstream
//! artifact, 4 numerical abort (non-finite loss or divergence guard),
//! 1 anything else. Clap's own usage errors also exit with 2.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Unreadable or invalid run configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A stage was invoked before the stage that produces its input.
    #[error("missing artifact {path}: run `rlsf {stage}` first")]
    MissingArtifact { path: PathBuf, stage: &'static str },

    /// Another process (or a crashed run) holds the output directory.
    #[error("lock file {0} exists; another run may be active in this output directory (delete the file if not)")]
    Locked(PathBuf),

    #[error(transparent)]
    Core(#[from] rlsf_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Core(rlsf_core::Error::Config(_)) => 2,
            CliError::MissingArtifact { .. } => 3,
            CliError::Core(e) if e.is_numerical() => 4,
            _ => 1,
        }
    }
}
