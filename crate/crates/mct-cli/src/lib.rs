//! Command-line surface for the caption transformer: toy data generation,
//! training, captioning, evaluation, gradient checking and the depth
//! ablation harness.
//!
//! Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure.

pub mod commands;
pub mod config;

use clap::error::ErrorKind;
use clap::Parser;

pub use commands::{Cli, CliError};

/// Parses and runs one invocation, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are successful exits, not usage errors.
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
