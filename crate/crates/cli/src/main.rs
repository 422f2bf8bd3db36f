//! `rebalance`: ingest trip records, simulate, train and compare policies.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rebalance_core::policies::PolicyKind;

#[derive(Debug, Parser)]
#[command(name = "rebalance", version, about = "Closed-fleet ridehailing rebalancing toolkit")]
pub struct Cli {
    /// Scenario TOML file, or a built-in scenario name (manhattan, desk).
    #[arg(long, global = true, default_value = "manhattan")]
    pub config: String,

    /// Single evaluation seed, or the training seed for `train`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,

    /// Worker threads; 0 uses every available core.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter a trip-record file and derive demand matrices.
    Ingest(IngestArgs),
    /// Run episodes under one or more policies and write their metrics.
    Simulate(SimulateArgs),
    /// Train a policy network.
    Train(TrainArgs),
    /// Evaluate policies on shared seeds and write a comparison table.
    Compare(CompareArgs),
    /// Train or load one policy per alpha and write the trade-off curve.
    SweepAlpha(SweepArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// TOML with `[filters]` and `[columns]` tables.
    #[arg(long)]
    pub filters: Option<PathBuf>,
    /// Comma-separated zone IDs; their order fixes the matrix order.
    #[arg(long, value_delimiter = ',')]
    pub zones: Vec<u32>,
    /// Keep the N busiest pickup zones instead of a fixed list.
    #[arg(long, conflicts_with = "zones")]
    pub top: Option<usize>,
    /// Pickup window as HH:MM-HH:MM.
    #[arg(long)]
    pub window: Option<String>,
    #[arg(long, default_value_t = ',')]
    pub delimiter: char,
    /// Also fit an exponential to the pickup gaps of this zone.
    #[arg(long)]
    pub fit_zone: Option<u32>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Policies to run; defaults to the scenario's list.
    #[arg(long = "policy", value_delimiter = ',')]
    pub policies: Vec<PolicyKind>,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Write every cost-sensitive transportation instance and its solution
    /// to this JSON file.
    #[arg(long)]
    pub dump_flows: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long = "policy", value_delimiter = ',')]
    pub policies: Vec<PolicyKind>,
    #[arg(long)]
    pub baseline: Option<PolicyKind>,
    #[arg(long)]
    pub weights: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_delimiter = ',')]
    pub alphas: Vec<f64>,
    /// Where per-alpha weights are looked up and saved.
    #[arg(long)]
    pub weights_dir: Option<PathBuf>,
    /// Train even when weights for an alpha already exist.
    #[arg(long)]
    pub retrain: bool,
    #[arg(long)]
    pub iterations: Option<usize>,
}

fn error_json(message: String, kind: &str) -> String {
    serde_json::json!({ "error": message, "kind": kind }).to_string()
}

/// Joins the error chain, skipping causes already quoted by their parent.
fn chain_message(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.ends_with(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", error_json(e.to_string().trim().to_string(), "usage"));
            return ExitCode::from(2);
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .downcast_ref::<rebalance_core::Error>()
                .map_or("other", rebalance_core::Error::kind);
            eprintln!("{}", error_json(chain_message(&e), kind));
            ExitCode::FAILURE
        }
    }
}
