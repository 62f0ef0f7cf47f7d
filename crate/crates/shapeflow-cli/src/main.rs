//! Pipeline driver: one binary, one sub-command per stage, exit codes
//! 0 (ok) / 2 (configuration) / 3 (missing input) / 4 (numerical failure).

mod commands;
mod context;
mod manifest;

use clap::Parser;

fn main() {
    let cli = context::Cli::parse();
    if let Err(err) = commands::run(cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
