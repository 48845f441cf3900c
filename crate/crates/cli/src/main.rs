use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use skipsponge_cli::commands::{cmd_attack, cmd_defend, cmd_energy, cmd_poison, cmd_train};
use skipsponge_cli::report::cmd_report;
use skipsponge_cli::{CliError, ExperimentConfig, Flags};

/// Parameter-space sponge attacks, sponge poisoning and defenses at desk scale.
#[derive(Debug, Parser)]
#[command(name = "skipsponge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a clean model.
    Train,
    /// Raise target-layer biases of a trained model.
    Attack,
    /// Train with the sponge objective next to a clean control.
    Poison,
    /// Run the configured defenses against an attacked model.
    Defend,
    /// Per-layer energy counts of a model on the test split.
    Energy,
    /// Merge run summaries into comparison tables.
    Report {
        /// Directory to scan; defaults to the output directory.
        run_dir: Option<PathBuf>,
    },
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Train => cmd_train(&cli.flags),
        Command::Attack => cmd_attack(&cli.flags),
        Command::Poison => cmd_poison(&cli.flags),
        Command::Defend => cmd_defend(&cli.flags),
        Command::Energy => cmd_energy(&cli.flags),
        Command::Report { run_dir } => {
            let dir = match run_dir {
                Some(d) => d.clone(),
                None => ExperimentConfig::resolve(&cli.flags)?.out_dir,
            };
            let rows = cmd_report(&dir)?;
            println!("{} rows written to {}", rows.len(), dir.join("report.csv").display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
