use std::path::PathBuf;

use thiserror::Error;

/// Command failures, each mapped to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    #[error("fairness violation: {0}")]
    Fairness(String),
    #[error("missing artifacts in {}: {}", dir.display(), list_paths(missing))]
    MissingArtifacts { dir: PathBuf, missing: Vec<PathBuf> },
}

fn list_paths(paths: &[PathBuf]) -> String {
    paths
        .iter()
        .map(|p| p.display().to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) | CliError::MissingArtifacts { .. } => 2,
            CliError::Fairness(_) => 3,
        }
    }
}

impl From<dsd_core::Error> for CliError {
    fn from(e: dsd_core::Error) -> Self {
        match e {
            dsd_core::Error::Config(m) => CliError::Config(m),
            dsd_core::Error::Fairness(m) => CliError::Fairness(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(format!("i/o error: {e}"))
    }
}
