//! Batch command-line front end: `correct`, `evaluate`, `simulate`,
//! `register-pair`, `info`. Logs go to stderr, data to files (or stdout for
//! the read-only commands). Exit codes are categorized per error kind so
//! cluster scripts can tell configuration mistakes from bad inputs.

mod commands;
mod manifest;
mod util;

use clap::{Parser, Subcommand};
use dceus_mc::McError;
use std::process::ExitCode;

/// Motion correction for 4D dynamic contrast-enhanced ultrasound cines.
#[derive(Parser)]
#[command(name = "dceus-mc", version, about, max_term_width = 100)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    Correct(commands::correct::Args),
    Evaluate(commands::evaluate::Args),
    Simulate(commands::simulate::Args),
    RegisterPair(commands::register_pair::Args),
    Info(commands::info::Args),
}

/// Stable exit-code taxonomy:
/// 0 success, 2 bad arguments/config, 3 I/O, 4 malformed or unsupported
/// file, 5 no injection detected, 6 degenerate data (geometry mismatch,
/// empty input, unusable content), 1 anything else.
fn exit_code_for(err: &McError) -> u8 {
    match err {
        McError::InvalidArgument(_) => 2,
        McError::Io(_) => 3,
        McError::Malformed(_) | McError::Unsupported(_) => 4,
        McError::NoInjection(_) => 5,
        McError::GeometryMismatch(_) | McError::EmptyInput(_) | McError::Degenerate(_) => 6,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Correct(a) => commands::correct::run(a),
        Cmd::Evaluate(a) => commands::evaluate::run(a),
        Cmd::Simulate(a) => commands::simulate::run(a),
        Cmd::RegisterPair(a) => commands::register_pair::run(a),
        Cmd::Info(a) => commands::info::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
