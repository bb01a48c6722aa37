//! Command-line driver: dataset generation, staged training, evaluation,
//! pseudo-label dumping, clustering and plotting. All outputs land under the
//! configured output directory.

pub mod commands;
pub mod config;
pub mod plot;
pub mod runs;

use std::fmt;

/// Error classes, each with its own process exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(gsmoe::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(gsmoe::Error::Diverged { .. }) => 3,
            CliError::Data(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<gsmoe::Error> for CliError {
    fn from(e: gsmoe::Error) -> Self {
        CliError::Data(e)
    }
}
