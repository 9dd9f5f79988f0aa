use std::process::ExitCode;

use clap::Parser;
use nce_lab::args::Cli;
use nce_lab::{commands, configure_threads, exit_code};

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(msg) = configure_threads(std::env::var("NCE_LAB_THREADS").ok().as_deref()) {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    match commands::run(&cli.command) {
        Ok(outcome) => {
            for line in outcome.lines {
                println!("{line}");
            }
            println!("manifest {}", outcome.manifest.hash);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()) as u8)
        }
    }
}
