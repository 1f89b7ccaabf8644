//! Command-line front end: synthetic data generation, training, evaluation,
//! gradient checks, the DPP demonstration and run replay.

// `!(x >= y)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod manifest;
pub mod mvt;

pub use commands::{run, Cli, Command};
pub use error::{CliError, CliResult};

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. Output goes to stdout, errors to stderr.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    use clap::Parser;
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { error::EXIT_USAGE } else { error::EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads.max(1)).build_global() {
        eprintln!("warning: {e}");
    }
    match run(&cli.command) {
        Ok(out) => {
            print!("{}", out.stdout);
            error::EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
