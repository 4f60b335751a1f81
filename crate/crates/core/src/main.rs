use std::process::ExitCode;

use clap::Parser;
use moelab::experiments::cli::{error_record, run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_record(&e));
            ExitCode::from(1)
        }
    }
}
