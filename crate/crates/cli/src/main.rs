use std::path::PathBuf;
use std::process::ExitCode;

use chainstack_cli::{run, Command};
use clap::Parser;

/// Multi-label video classification pipeline.
#[derive(Parser)]
#[command(version, about)]
struct Args {
    command: Command,
    /// Experiment config (TOML).
    config: PathBuf,
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args.command, &args.config, &mut |line| println!("{line}")) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
