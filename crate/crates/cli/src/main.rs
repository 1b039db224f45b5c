//! `ditmem`: bank building, encoder training, generation, steering, ablation
//! and reporting on top of the `ditmem` library.

mod bank;
mod common;
mod generate;
mod report;
mod steer;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use common::exit_code_for;

#[derive(Parser, Debug)]
#[command(name = "ditmem", version, about = "Memory-augmented video diffusion lab")]
struct Cli {
    /// TOML config file merged over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config value, e.g. `--set training.steps=50`. Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build, cache and inspect the reference bank.
    #[command(subcommand)]
    Bank(bank::BankCommand),
    /// Train the memory encoder against the frozen backbone.
    Train(train::TrainArgs),
    /// Sample a latent video for a prompt with retrieved memory.
    Generate(generate::GenerateArgs),
    /// Extract steering tables and sample with them.
    #[command(subcommand)]
    Steer(steer::SteerCommand),
    /// Train the five encoder variants and tabulate the results.
    Ablate(train::AblateArgs),
    /// Render plots for a run directory.
    Report(report::ReportArgs),
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = ditmem::config::RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::Bank(c) => bank::run(&cfg, c),
        Command::Train(a) => train::train(&cfg, a),
        Command::Generate(a) => generate::run(&cfg, a),
        Command::Steer(c) => steer::run(&cfg, c),
        Command::Ablate(a) => train::ablate(&cfg, a),
        Command::Report(a) => report::run(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
