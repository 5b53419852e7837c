use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

mod commands;

/// Compliance-adjusted cost-effectiveness analysis of randomised trials.
#[derive(Parser, Debug)]
#[command(name = "cace", version, about)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a trial from a data-generating process.
    Simulate(SimulateArgs),
    /// Estimate effects on cost and QALYs with one estimand and missing-data method.
    Estimate(EstimateArgs),
    /// Write multiply imputed datasets and a manifest.
    Impute(ImputeArgs),
    /// Pattern-mixture sensitivity sweep over offsets for imputed values.
    Sensitivity(SensitivityArgs),
    /// Net benefit, ICER and acceptability curve.
    Cea(CeaArgs),
    /// Monte Carlo bias and coverage study.
    Mc(McArgs),
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// Trial CSV with a header row.
    #[arg(long)]
    pub data: PathBuf,
    /// Column mapping, e.g. `z=arm,d=received,y1=cost,y2=qaly`.
    #[arg(long)]
    pub schema: Option<String>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// JSON data-generating process (defaults to the reference scenario).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Write the ground truth as JSON.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct MethodArgs {
    /// itt, pp, cace-3sls, cace-2sls or bayes.
    #[arg(long, default_value = "cace-3sls")]
    pub estimand: String,
    /// cca, ipw, mi or bayes.
    #[arg(long, default_value = "cca")]
    pub missing: String,
    /// Comma-separated covariate names.
    #[arg(long, value_delimiter = ',')]
    pub covariates: Vec<String>,
    /// JSON pipeline settings; flags below override it.
    #[arg(long)]
    pub settings: Option<PathBuf>,
    /// Willingness to pay per QALY.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Classical instead of robust sandwich covariance.
    #[arg(long)]
    pub classical: bool,
    /// Dropout order for IPW, e.g. `eq5d0,cost,qaly`.
    #[arg(long)]
    pub cascade: Option<String>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub cycles: Option<usize>,
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub burnin: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
    /// Seed for imputation and MCMC.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub method: MethodArgs,
    /// Output JSON (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ImputeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 50)]
    pub m: usize,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 10)]
    pub cycles: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for `imputed_NNN.csv` files and `manifest.json`.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct SensitivityArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub method: MethodArgs,
    /// Offsets for imputed QALYs in the treatment arm.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub delta_qaly_a1: Vec<f64>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub delta_qaly_a0: Vec<f64>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub delta_cost_a1: Vec<f64>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub delta_cost_a0: Vec<f64>,
    /// CSV table (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CeaArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub method: MethodArgs,
    /// `start:stop:step`.
    #[arg(long, default_value = "0:50000:1000")]
    pub grid: String,
    /// JSON output (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Acceptability curve as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct McArgs {
    /// Full study configuration (JSON), including acceptance checks.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Data-generating process (JSON); replaces the one in `--config`.
    #[arg(long)]
    pub dgp: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub methods: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    pub missing: Vec<String>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-replicate log as JSON lines.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result: Result<bool> = match cli.command {
        Command::Simulate(a) => commands::simulate(a).map(|_| true),
        Command::Estimate(a) => commands::estimate(a).map(|_| true),
        Command::Impute(a) => commands::impute(a).map(|_| true),
        Command::Sensitivity(a) => commands::sensitivity(a).map(|_| true),
        Command::Cea(a) => commands::cea(a).map(|_| true),
        Command::Mc(a) => commands::mc(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
