use std::path::PathBuf;

use attn_surgery::Error;

/// Process exit codes.
pub mod exit {
    pub const OTHER: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const DIVERGENCE: i32 = 3;
    pub const OUTPUT: i32 = 4;
    pub const INFEASIBLE: i32 = 5;
    pub const MISSING_CHECKPOINT: i32 = 6;
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Output { path: PathBuf, reason: String },
    Core(Error),
}

impl CliError {
    pub fn output(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Self::Output {
            path: path.into(),
            reason: reason.to_string(),
        }
    }

    pub fn code(&self) -> i32 {
        match self {
            Self::Config(_) => exit::CONFIG,
            Self::Output { .. } => exit::OUTPUT,
            Self::Core(Error::Divergence { .. }) => exit::DIVERGENCE,
            Self::Core(Error::Infeasible { .. }) => exit::INFEASIBLE,
            Self::Core(Error::MissingCheckpoint { .. }) => exit::MISSING_CHECKPOINT,
            Self::Core(_) => exit::OTHER,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Config(msg) => write!(f, "config error: {msg}"),
            Self::Output { path, reason } => write!(f, "cannot write {}: {reason}", path.display()),
            Self::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self::Core(e)
    }
}
