use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    match pacq_cli::run(pacq_cli::Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
