//! `midfsl`: train, evaluate and inspect few-shot models from the shell.

mod commands;
mod config;
mod plot;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::ConfigError;

#[derive(Parser)]
#[command(
    name = "midfsl",
    version,
    about = "Few-shot learning with mid-level residual prediction"
)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the base split described by a run file.
    Train(commands::train::Args),
    /// Episodic K-way n-shot evaluation of a checkpoint.
    Eval(commands::eval::Args),
    /// Proxy-A-distance between two corpora under a checkpoint's features.
    Pad(commands::pad::Args),
    /// Generate a synthetic domain-shift dataset.
    MakeSynth(commands::synth::Args),
    /// Bar chart of evaluation results with confidence intervals.
    Plot(commands::plot::Args),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let config = err.chain().any(|e| {
        e.is::<ConfigError>()
            || matches!(
                e.downcast_ref::<midfsl::Error>(),
                Some(midfsl::Error::InvalidConfig(_))
            )
    });
    if config {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Train(a) => commands::train::run(a),
        Command::Eval(a) => commands::eval::run(a),
        Command::Pad(a) => commands::pad::run(a),
        Command::MakeSynth(a) => commands::synth::run(a),
        Command::Plot(a) => commands::plot::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
