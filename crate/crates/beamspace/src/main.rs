use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = beamspace::cli::Cli::parse();
    match beamspace::cli::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
