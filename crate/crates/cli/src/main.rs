//! `alignbench`: run experiment stages from one JSON config.
//!
//! Exit codes: 0 success, 2 configuration error, 3 stage failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use alignbench_core::pipeline::{self, ExperimentConfig, Stage};
use alignbench_core::Error;

#[derive(Parser, Debug)]
#[command(name = "alignbench", version, about = "Content-aligned real/fake benchmark harness")]
struct Cli {
    /// Experiment config (JSON). Without it every field takes its default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Comma-separated stage list, or `all`. Only valid with the `all` command.
    #[arg(long, global = true)]
    stages: Option<String>,
    /// `key.path=value` override, applied after the config file. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Print the resolved config and exit.
    #[arg(long, global = true)]
    dry_run: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Ingest and crop the real images.
    BuildDataset,
    /// Produce the six fake variants per real through the sidecar.
    Generate(GenerateArgs),
    /// Resolve the augmentation policy and train the probe.
    Augment,
    /// Score the test split.
    Score,
    /// Compute bAcc, AUC, ECE and NLL per generator.
    Evaluate,
    /// Perturbation sweep over the test split.
    Robustness,
    /// Mean real-minus-fake power spectra.
    Spectra(SpectraArgs),
    /// Format bias report and optional rebalancing.
    Audit(AuditArgs),
    /// Every stage in order (or the `--stages` subset).
    All,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Sidecar base URL, or `mock` for the in-process generator.
    #[arg(long)]
    endpoint: Option<String>,
    /// Shorthand for `--endpoint mock`.
    #[arg(long, conflicts_with = "endpoint")]
    mock: bool,
}

#[derive(Args, Debug)]
struct SpectraArgs {
    /// FFT window side in pixels.
    #[arg(long)]
    size: Option<u32>,
    /// Radial profile bands.
    #[arg(long)]
    bands: Option<usize>,
}

#[derive(Args, Debug)]
struct AuditArgs {
    /// Report only; skip writing the `_unbiased` dataset.
    #[arg(long)]
    no_rebalance: bool,
}

enum Failure {
    Config(String),
    Stage(String),
}

fn overrides(cli: &Cli) -> Vec<String> {
    let mut sets = Vec::new();
    if let Some(s) = cli.seed {
        sets.push(format!("seed={s}"));
    }
    if let Some(o) = &cli.out {
        sets.push(format!("out_dir={}", serde_json::Value::String(o.display().to_string())));
    }
    match &cli.command {
        Command::Generate(g) => {
            let endpoint = if g.mock { Some("mock".to_string()) } else { g.endpoint.clone() };
            if let Some(e) = endpoint {
                sets.push(format!("generation.endpoint={}", serde_json::Value::String(e)));
            }
        }
        Command::Spectra(s) => {
            if let Some(v) = s.size {
                sets.push(format!("spectra.size={v}"));
            }
            if let Some(v) = s.bands {
                sets.push(format!("spectra.bands={v}"));
            }
        }
        Command::Audit(a) if a.no_rebalance => sets.push("audit.rebalance=false".into()),
        _ => {}
    }
    // Explicit --set flags win over the convenience flags above.
    sets.extend(cli.sets.iter().cloned());
    sets
}

fn stages(cli: &Cli) -> Result<Vec<Stage>, Failure> {
    let single = match cli.command {
        Command::BuildDataset => Stage::BuildDataset,
        Command::Generate(_) => Stage::Generate,
        Command::Augment => Stage::Augment,
        Command::Score => Stage::Score,
        Command::Evaluate => Stage::Evaluate,
        Command::Robustness => Stage::Robustness,
        Command::Spectra(_) => Stage::Spectra,
        Command::Audit(_) => Stage::Audit,
        Command::All => {
            return match &cli.stages {
                Some(s) => pipeline::parse_stages(s).map_err(|e| Failure::Config(e.to_string())),
                None => Ok(Stage::ALL.to_vec()),
            };
        }
    };
    if cli.stages.is_some() {
        return Err(Failure::Config("--stages is only valid with the `all` command".into()));
    }
    Ok(vec![single])
}

fn classify(e: Error) -> Failure {
    match e {
        Error::Config(_) => Failure::Config(e.to_string()),
        other => Failure::Stage(other.to_string()),
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let sets = overrides(cli);
    let config = match &cli.config {
        Some(p) => ExperimentConfig::load(p, &sets),
        None => ExperimentConfig::from_json(None, &sets),
    }
    .map_err(|e| Failure::Config(e.to_string()))?;
    let stages = stages(cli)?;
    if cli.dry_run {
        println!("{}", serde_json::to_string_pretty(&config).map_err(|e| Failure::Config(e.to_string()))?);
        return Ok(());
    }
    let outcome = pipeline::run_pipeline(&config, &stages).map_err(classify)?;
    let names = |s: &[Stage]| s.iter().map(|s| s.name()).collect::<Vec<_>>().join(",");
    println!("config {}", outcome.config_hash);
    println!("ran: {}", names(&outcome.ran));
    println!("up to date: {}", names(&outcome.skipped));
    println!("artifacts: {}", config.out_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("alignbench: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Stage(msg)) => {
            eprintln!("alignbench: {msg}");
            ExitCode::from(3)
        }
    }
}
