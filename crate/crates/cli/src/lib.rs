//! Operator commands behind the `memgraph` binary.

pub mod commands;
pub mod config;
pub mod server;

pub use config::Config;

/// Exit code for successful commands.
pub const EXIT_OK: i32 = 0;
/// Exit code for failures of the work itself (bad corpus, policy errors, ...).
pub const EXIT_DOMAIN: i32 = 1;
/// Exit code for bad flags or config.
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },
    #[error(transparent)]
    Domain(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } => EXIT_USAGE,
            CliError::Domain(_) => EXIT_DOMAIN,
        }
    }
}

pub(crate) fn domain<E: Into<anyhow::Error>>(e: E) -> CliError {
    CliError::Domain(e.into())
}
