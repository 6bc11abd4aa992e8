//! `bvcqr` — operator surface for the mixture-regression pipeline.
//!
//! Subcommands: `simulate` (panel + ground truth from a built-in or file
//! scenario), `fit` (preprocess, design build, NUTS sampling, summaries),
//! `eval` (recovery metrics of a fit against a ground truth), `reproduce`
//! (both scenarios x both priors, side-by-side table with acceptance bands).
//!
//! Exit codes are a stable contract: 0 success, 1 usage/config, 2 data,
//! 3 numerical or diagnostic failure.

mod eval;
mod fit;
mod manifest;
mod reproduce;
mod simulate;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "bvcqr", version, about = "Bayesian mixture regression with horseshoe shrinkage")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic exposure panel plus its ground truth.
    Simulate(SimulateArgs),
    /// Fit the mixture model to a panel CSV.
    Fit(FitArgs),
    /// Score a fit's mixture-effect recovery against a ground-truth file.
    Eval(EvalArgs),
    /// Run both built-in scenarios under both priors and tabulate recovery.
    Reproduce(ReproduceArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Built-in scenario id (1 or 2).
    #[arg(long, conflicts_with = "scenario_config")]
    scenario: Option<u32>,
    /// Scenario description as JSON, instead of a built-in id.
    #[arg(long, value_name = "FILE")]
    scenario_config: Option<PathBuf>,
    /// Generator seed (mandatory: no silent entropy).
    #[arg(long)]
    seed: u64,
    /// Output directory; receives panel.csv, truth.json, manifest.json.
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Long-format exposure panel CSV.
    panel: PathBuf,
    /// Output directory; receives draws.csv, effects.csv, diagnostics.json,
    /// preprocess.json, manifest.json.
    out_dir: PathBuf,
    /// TOML configuration with [sampler], [hyper], [preprocess], [design]
    /// sections; flags below override it.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Per-chemical limit-of-detection CSV (name,lod).
    #[arg(long, value_name = "FILE")]
    lod: Option<PathBuf>,
    /// Sampler seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Total iterations per chain, warmup included.
    #[arg(long)]
    iterations: Option<usize>,
    /// Warmup iterations discarded from each chain.
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    target_accept: Option<f64>,
    /// Skip the detection-fraction filter (pre-cleaned or simulated data).
    #[arg(long)]
    no_detect_filter: bool,
    /// Skip LOD/sqrt(2) imputation.
    #[arg(long)]
    no_lod_impute: bool,
    /// Skip 2-SD scaling.
    #[arg(long)]
    no_scale: bool,
    /// Ablation: replace the hierarchical shrinkage prior on the mixture
    /// coefficients with a fixed wide-variance normal.
    #[arg(long)]
    no_horseshoe: bool,
    /// Also write design_audit.csv (dense X and Q, sparse W and U triplets).
    #[arg(long)]
    design_audit: bool,
    /// Also write debug_terms.json (log-joint decomposition at each chain's
    /// final retained draw).
    #[arg(long)]
    debug_terms: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory produced by `fit`.
    #[arg(long, value_name = "DIR")]
    fit: PathBuf,
    /// Ground-truth JSON produced by `simulate`.
    #[arg(long, value_name = "FILE")]
    truth: PathBuf,
    /// Output directory; receives heval.json, manifest.json.
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReproduceArgs {
    /// Output directory; receives one sub-directory per scenario x prior run
    /// plus table.csv, report.json, manifest.json.
    out_dir: PathBuf,
    /// Base seed for all sub-runs (mandatory: no silent entropy).
    #[arg(long)]
    seed: u64,
    /// Reduced budget: n=50 subjects, 800 iterations, bands widened x1.5.
    #[arg(long)]
    quick: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // clap reserves 2 for usage errors; the contract here is 1.
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Simulate(args) => simulate::run(&args),
        Command::Fit(args) => fit::run(&args),
        Command::Eval(args) => eval::run(&args),
        Command::Reproduce(args) => reproduce::run(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
