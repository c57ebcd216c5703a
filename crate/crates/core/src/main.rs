use std::process::ExitCode;

use clap::Parser;
use conscientia::cli::{execute, Cli};

fn main() -> ExitCode {
    ExitCode::from(execute(Cli::parse()))
}
