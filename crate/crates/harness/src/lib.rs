//! Experiment orchestration for sparse-supervision phase segmentation:
//! configuration, dataset plumbing, the two training stages, and the
//! supervision-regime experiment matrix behind the `phaseseg` CLI.

pub mod config;
pub mod data;
pub mod matrix;
pub mod train;

///// Harness-level error carrying the process exit code: configuration
/// problems exit 2, training divergence exits 3, everything else 1.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Other(_) => 1,
        }
    }
}

impl From<phaseseg_core::error::Error> for CliError {
    fn from(e: phaseseg_core::error::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(format!("io error: {e}"))
    }
}
