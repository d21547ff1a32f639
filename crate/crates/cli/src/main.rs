use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use posemap_cli::commands::{cmd_gen_data, cmd_report, cmd_train};
use posemap_cli::config::{parse_pairs, RunConfig};
use posemap_cli::CliError;

/// Desk-scale pose inference with feature-mapping domain adaptation:
/// dataset generation, training, and reporting.
#[derive(Parser)]
#[command(name = "posemap", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the train/test dataset files.
    GenData(Common),
    /// Train a model on generated datasets.
    Train(Common),
    /// Produce evaluation, ablation, analysis, gradcheck, or bench reports.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// Path to a key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the `out` key).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed (overrides the `seed` key).
    #[arg(long)]
    seed: Option<u64>,
    /// Individual key=value overrides, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn resolve(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Validation(format!("cannot read config {}: {e}", path.display()))
        })?;
        cfg.apply(parse_pairs(&text)?)?;
    }
    if !common.set.is_empty() {
        let mut pairs = BTreeMap::new();
        for (i, entry) in common.set.iter().enumerate() {
            let Some((k, v)) = entry.split_once('=') else {
                return Err(CliError::Validation(format!(
                    "--set argument {} is not KEY=VALUE: {entry:?}",
                    i + 1
                )));
            };
            if pairs.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(CliError::Validation(format!("--set repeats key {k}")));
            }
        }
        cfg.apply(pairs)?;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run() -> Result<(), CliError> {
    let cli = Cli::parse();
    match &cli.command {
        Command::GenData(c) => cmd_gen_data(&resolve(c)?),
        Command::Train(c) => cmd_train(&resolve(c)?),
        Command::Report(c) => cmd_report(&resolve(c)?),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
