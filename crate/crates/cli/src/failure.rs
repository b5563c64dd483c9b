use std::path::PathBuf;

use thiserror::Error;

/// Command failures, each tied to a process exit code.
#[derive(Debug, Error)]
pub enum Failure {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("missing input {}: {hint}", path.display())]
    MissingInput { path: PathBuf, hint: &'static str },
    #[error("{detail}; diagnostics written to {}", diagnostics.display())]
    NonConvergence { detail: String, diagnostics: PathBuf },
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Io(_) => 3,
            Failure::MissingInput { .. } => 4,
            Failure::NonConvergence { .. } => 5,
        }
    }

    pub fn io(path: &std::path::Path, err: std::io::Error) -> Self {
        Failure::Io(format!("{}: {err}", path.display()))
    }
}

impl From<illdeath::Error> for Failure {
    fn from(e: illdeath::Error) -> Self {
        use illdeath::Error as E;
        match e {
            E::Io(err) => Failure::Io(err.to_string()),
            E::Csv(err) if err.is_io_error() => Failure::Io(err.to_string()),
            other => Failure::Config(other.to_string()),
        }
    }
}

pub type CmdResult<T> = std::result::Result<T, Failure>;
