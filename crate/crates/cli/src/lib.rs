//! File formats and the `fmvit` command surface.

pub mod commands;
pub mod image;
pub mod report;
pub mod spec_file;
pub mod weights;

use std::path::Path;

pub use commands::{run, Cli, Outcome};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("spec: {0}")]
    Parse(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("weight file: {0}")]
    Format(String),
    #[error(transparent)]
    Core(#[from] fmvit_core::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub(crate) fn in_file(self, path: &Path) -> Self {
        match self {
            CliError::Format(m) => CliError::Format(format!("{}: {m}", path.display())),
            CliError::Parse(m) => CliError::Parse(format!("{}: {m}", path.display())),
            other => other,
        }
    }

    /// Process exit code: 2 usage, 3 spec or configuration, 4 file I/O and
    /// format (including CRC), 1 anything else. A failed verification exits
    /// with [`EXIT_VERIFY_FAILED`] through [`Outcome`].
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Parse(_) | CliError::Core(fmvit_core::Error::Config(_)) => 3,
            CliError::Io { .. } | CliError::Format(_) => 4,
            CliError::Core(_) => 1,
        }
    }
}

pub const EXIT_VERIFY_FAILED: i32 = 5;
