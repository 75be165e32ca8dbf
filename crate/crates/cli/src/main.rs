use std::process::ExitCode;

use clap::Parser;
use hat_cli::Cli;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match hat_cli::run(&cli) {
        Ok(outcome) => {
            println!("{}", outcome.message);
            if outcome.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
