use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use miai_cli::commands::{cmd_eval, cmd_gen_data, cmd_train};
use miai_cli::report::cmd_report;
use miai_cli::{CliError, ExperimentConfig};

/// Desk-scale multimodal VAE laboratory: dataset generation, two-stage
/// training, metric evaluation, and report assembly.
#[derive(Parser)]
#[command(name = "miai", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and cache the configured dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the root seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train stage 1 (and stage 2 where the family has one).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate metrics against the trained checkpoints.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Merge metrics CSVs into a comparison table and curve files.
    Report {
        /// Primary experiment config; its metrics.csv and curves.csv are
        /// included when present.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Additional metrics/curve CSVs to merge.
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(
    path: &PathBuf,
    out: Option<PathBuf>,
    seed: Option<u64>,
) -> miai_cli::Result<ExperimentConfig> {
    let mut config = ExperimentConfig::from_file(path)?;
    if let Some(seed) = seed {
        config.override_seed(seed);
    }
    if let Some(out) = out {
        config.override_out(out);
    }
    Ok(config)
}

fn run(cli: Cli) -> miai_cli::Result<()> {
    match cli.command {
        Command::GenData { config, out, seed } => {
            let config = load_config(&config, out, seed)?;
            let path = cmd_gen_data(&config)?;
            println!("dataset written to {}", path.display());
        }
        Command::Train { config, out, seed } => {
            let config = load_config(&config, out, seed)?;
            let artifacts = cmd_train(&config)?;
            println!("stage-1 checkpoint: {}", artifacts.stage1.display());
            if let Some(s2) = artifacts.stage2 {
                println!("stage-2 checkpoint: {}", s2.display());
            }
            println!("manifest: {}", artifacts.manifest.display());
        }
        Command::Eval { config, out, seed } => {
            let config = load_config(&config, out, seed)?;
            let artifacts = cmd_eval(&config)?;
            println!("metrics: {}", artifacts.metrics.display());
            if let Some(c) = artifacts.curves {
                println!("curves: {}", c.display());
            }
            if let Some(s) = artifacts.skipped {
                println!("skipped metrics listed in {}", s.display());
            }
        }
        Command::Report { config, inputs, out } => {
            let mut paths = Vec::new();
            let mut out_dir = out.clone().unwrap_or_else(|| PathBuf::from("."));
            if let Some(cfg_path) = config {
                let config = load_config(&cfg_path, out, None)?;
                let metrics = miai_cli::commands::metrics_path(&config);
                if metrics.exists() {
                    paths.push(metrics);
                }
                let curves = miai_cli::commands::curves_path(&config);
                if curves.exists() {
                    paths.push(curves);
                }
                out_dir = config.output.dir.clone();
            }
            paths.extend(inputs);
            if paths.is_empty() {
                return Err(CliError::Config(
                    "report needs at least one metrics CSV (via --config or positional inputs)"
                        .into(),
                ));
            }
            let table = cmd_report(&paths, &out_dir)?;
            print!("{}", table);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
