use std::process::ExitCode;

use clap::Parser;

mod args;
mod commands;
mod error;
mod manifest;
mod output;

fn main() -> ExitCode {
    let cli = args::Cli::parse();
    match commands::dispatch(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
