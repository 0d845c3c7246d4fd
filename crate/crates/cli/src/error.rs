use std::process::ExitCode;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments or an input that is not what the command takes.
    #[error("{0}")]
    Usage(String),

    /// Missing, unreadable or corrupt data and model files.
    #[error("{0}")]
    Data(String),

    /// A broken internal invariant.
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Internal(_) => 3,
        })
    }

    /// Wraps a core error with `context`, classified by kind.
    pub fn from_core(context: impl std::fmt::Display, err: binnet::Error) -> Self {
        use binnet::Error as E;
        let msg = format!("{context}: {err}");
        match err {
            E::InvalidArgument(_) | E::MemoryGuard { .. } => CliError::Usage(msg),
            E::Shape(_)
            | E::Io(_)
            | E::BadMagic(_)
            | E::UnsupportedVersion(_)
            | E::Truncated(_)
            | E::ArchMismatch(_)
            | E::Format(_)
            | E::NonFiniteGradient { .. } => CliError::Data(msg),
            E::NotBinary { .. } | E::PaddingAudit { .. } | E::Layer { .. } => CliError::Internal(msg),
        }
    }
}

/// `result.ctx("loading model")` turns a core error into a [`CliError`].
pub trait Context<T> {
    fn ctx(self, context: impl std::fmt::Display) -> Result<T>;
}

impl<T> Context<T> for binnet::Result<T> {
    fn ctx(self, context: impl std::fmt::Display) -> Result<T> {
        self.map_err(|e| CliError::from_core(context, e))
    }
}

impl<T> Context<T> for std::io::Result<T> {
    fn ctx(self, context: impl std::fmt::Display) -> Result<T> {
        self.map_err(|e| CliError::Data(format!("{context}: {e}")))
    }
}
