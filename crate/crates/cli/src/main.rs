//! `fed2` experiment runner.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use fed2_core::experiment::{compare, load_config, run_cost_sweep, run_experiment};
use fed2_core::fed::read_metrics_csv;

#[derive(Parser)]
#[command(name = "fed2", version = fed2_core::experiment::VERSION, about = "Federated learning experiments with feature-aligned averaging")]
struct Cli {
    /// Output directory; overrides the config's `outputs.dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed; overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a config file or a previous run's manifest.json.
    Run { config: PathBuf },
    /// Compare two metrics.csv files round by round (deltas are b - a).
    Compare { a: PathBuf, b: PathBuf },
    /// Evaluate the communication cost grid of a config without training.
    CostSweep { config: PathBuf },
}

fn load(path: &Path, seed: Option<u64>) -> Result<fed2_core::experiment::ExperimentConfig> {
    let mut cfg = load_config(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn read_metrics(path: &Path) -> Result<Vec<fed2_core::fed::RoundMetrics>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_metrics_csv(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config } => {
            let cfg = load(&config, cli.seed)?;
            let outcome = run_experiment(&cfg, cli.out.as_deref())?;
            for w in &outcome.manifest.warnings {
                eprintln!("warning: {w}");
            }
            let last = outcome.run.metrics.last().expect("at least one round");
            println!(
                "{} rounds, final accuracy {:.4}, alignment distance {}, wrote {}",
                outcome.run.metrics.len(),
                last.accuracy,
                last.alignment_distance.map_or("-".into(), |d| format!("{d:.4}")),
                outcome.out_dir.display()
            );
        }
        Command::Compare { a, b } => {
            let cmp = compare(&read_metrics(&a)?, &read_metrics(&b)?)?;
            print!("{}", cmp.table());
            if let Some(dir) = &cli.out {
                std::fs::create_dir_all(dir)?;
                let path = dir.join("comparison.csv");
                cmp.write_csv(File::create(&path)?)?;
                println!("wrote {}", path.display());
            }
        }
        Command::CostSweep { config } => {
            let cfg = load(&config, cli.seed)?;
            let out = cli.out.clone().unwrap_or_else(|| cfg.outputs.dir.clone());
            let rows = run_cost_sweep(&cfg, &out)?;
            println!("{} cost rows written to {}", rows.len(), out.join("cost_sweep.csv").display());
        }
    }
    Ok(())
}
