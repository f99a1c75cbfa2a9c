use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hodbench::error::{Error, Result};
use hodbench::pipeline::{
    compare, emit_report, run_pipeline, run_stage, ExperimentConfig, ReportFormat, Stage, StageOutcome, Summary,
};

#[derive(Parser)]
#[command(name = "hodbench", version, about = "Long-tail outlier detection benchmark runner")]
struct Cli {
    /// JSON experiment config; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Report format: csv, json or svg.
    #[arg(long, global = true, default_value = "csv")]
    format: ReportFormat,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    Generate,
    Split,
    Train,
    Score,
    Evaluate,
    Ensemble,
    Report,
    /// Print per-metric deltas (B - A) and sign tests for two summaries.
    Compare { a: PathBuf, b: PathBuf },
    /// Every stage in order.
    Run,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn stage(cfg: &ExperimentConfig, s: Stage) -> Result<()> {
    match run_stage(cfg, s)? {
        StageOutcome::Ran => println!("{s}: done"),
        StageOutcome::UpToDate => println!("{s}: up to date"),
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Generate => stage(&cfg, Stage::Generate),
        Command::Split => stage(&cfg, Stage::Split),
        Command::Train => stage(&cfg, Stage::Train),
        Command::Score => stage(&cfg, Stage::Score),
        Command::Evaluate => stage(&cfg, Stage::Evaluate),
        Command::Ensemble => stage(&cfg, Stage::Ensemble),
        Command::Report => {
            stage(&cfg, Stage::Report)?;
            for p in emit_report(&cfg.out_dir, cli.format).map_err(|e| e.in_stage("report"))? {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::Compare { a, b } => {
            let cmp = Summary::read(a)
                .and_then(|sa| compare(&sa, &Summary::read(b)?))
                .map_err(|e| e.in_stage("compare"))?;
            println!("{}", serde_json::to_string_pretty(&cmp).map_err(Error::from)?);
            Ok(())
        }
        Command::Run => {
            let dir = run_pipeline(&cfg)?;
            println!("{}", dir.join("summary.json").display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
