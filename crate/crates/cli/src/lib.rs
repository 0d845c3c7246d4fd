//! `binnet` command-line driver: MNIST training, prediction, model
//! conversion and GEMM benchmark sweeps.

pub mod args;
pub mod bench;
pub mod convert;
pub mod error;
pub mod mnist;
pub mod predict;
pub mod train;

use std::path::Path;

pub use args::{Cli, Command};
pub use error::{CliError, Result};

/// Environment variable capping worker threads when `--threads` is absent.
pub const THREADS_ENV: &str = "BMX_THREADS";

/// `--threads`, else `BMX_THREADS`, else the available parallelism.
pub fn resolve_threads(flag: Option<usize>) -> Result<usize> {
    if let Some(n) = flag {
        return if n == 0 {
            Err(CliError::Usage("--threads must be at least 1".into()))
        } else {
            Ok(n)
        };
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Usage(format!("{THREADS_ENV}={v:?} is not a positive integer"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Atomic write of a whole output file.
pub fn write_output(path: &Path, bytes: &[u8]) -> Result<()> {
    binnet::modelio::write_atomic(path, bytes)
        .map_err(|e| CliError::Data(format!("writing {}: {e}", path.display())))
}

/// Fails early when the directory an output would land in is missing.
pub fn check_output_dir(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => Err(CliError::Usage(format!(
            "output directory {} does not exist",
            dir.display()
        ))),
        _ => Ok(()),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train::run(&a).map(|_| ()),
        Command::Predict(a) => predict::run(&a).map(|_| ()),
        Command::Convert(a) => convert::run(&a).map(|_| ()),
        Command::Bench(b) => bench::run(&b).map(|_| ()),
    }
}
