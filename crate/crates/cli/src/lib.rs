//! Library surface of the `pilight` binary: run configuration plus one
//! entry point per subcommand. The binary is a thin argument parser over
//! these functions so tests can drive the exact command code paths.

pub mod commands;
pub mod config;

pub use config::RunConfig;

/// Command failures mapped to process exit codes: usage 1, data 2,
/// trend assertion 3.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data: {0}")]
    Data(String),
    #[error("trend assertion failed: {0}")]
    Trend(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Trend(_) => 3,
        }
    }
}

impl From<pilight_core::Error> for CliError {
    fn from(e: pilight_core::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

/// Cap the rayon worker pool from `PILIGHT_THREADS` (ignored when unset or
/// unparsable, or when a global pool already exists).
pub fn init_thread_pool() {
    if let Ok(v) = std::env::var("PILIGHT_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
    }
}
