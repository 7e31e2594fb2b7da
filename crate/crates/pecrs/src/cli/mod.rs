//! Command-line entry point: corpus generation, training, evaluation, batch
//! recommendation, response generation, item-bank encoding, and the chat
//! REPL.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime error.

mod chat;
mod commands;

use clap::error::ErrorKind;
use clap::Parser;

pub use commands::{Cli, Command};

use crate::error::{DataError, ModelError};

/// Process-level exit status for an error.
pub fn exit_code_for(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<DataError>().is_some() {
        2
    } else if err.downcast_ref::<ModelError>().is_some() {
        3
    } else if err.downcast_ref::<std::io::Error>().is_some() {
        2
    } else {
        3
    }
}

/// Caps the global rayon pool when PECRS_THREADS is set.
pub fn init_threads() {
    if let Ok(value) = std::env::var("PECRS_THREADS") {
        if let Ok(n) = value.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

/// Parses arguments and runs the selected command, returning the process
/// exit code.
pub fn main_entry<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    init_threads();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match commands::run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code_for(&e)
        }
    }
}
