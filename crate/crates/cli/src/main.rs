//! `gxe`: structured gene-environment interaction analysis from the command line.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 numerical failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gxe_core::benchmark::Method;
use gxe_core::GxeError;
use serde::{Deserialize, Serialize};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(GxeError),
}

impl From<GxeError> for CliError {
    fn from(e: GxeError) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numerical() => 2,
            _ => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "gxe", version, about = "Penalized identification of structured G x E interactions")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// TOML file with one table per subcommand; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// More log output (repeat for trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a train/test pair from a simulation scenario.
    Simulate(SimulateArgs),
    /// Fit one method at fixed penalty levels.
    Fit(FitArgs),
    /// Tune the penalty levels by BIC over a grid.
    Tune(TuneArgs),
    /// Keep the G columns with the strongest marginal association.
    Screen(ScreenArgs),
    /// Run methods over simulated replicates and tabulate the metrics.
    Benchmark(BenchmarkArgs),
    /// Selection stability and held-out accuracy over random subsamples.
    Stability(StabilityArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyChoice {
    Spline,
    Laplacian,
    Custom,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeChoice {
    Individual,
    Region,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CriterionChoice {
    Bic,
    Ebic,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: GxeError| e.to_string())
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct SimulateArgs {
    /// Scenario name such as ar03-m1-linear or ld05-m2-aft.
    #[arg(long)]
    pub scenario: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub p: Option<usize>,
    /// Number of E factors.
    #[arg(long)]
    pub q: Option<usize>,
    #[arg(long)]
    pub test_n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub replicate: Option<u64>,
    /// Output directory for train.csv, test.csv and truth.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct PenaltyArgs {
    #[arg(long, value_enum)]
    pub penalty: Option<PenaltyChoice>,
    /// Triplet file `row col value` (0-based) for --penalty custom.
    #[arg(long)]
    pub penalty_file: Option<PathBuf>,
    /// Adjacency triplet file for --penalty laplacian; built from the
    /// correlations of the G columns when absent.
    #[arg(long)]
    pub adjacency: Option<PathBuf>,
    /// Significance level of the correlation test that builds the graph.
    #[arg(long)]
    pub alpha_cut: Option<f64>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct SolverArgs {
    /// MCP regularization parameter.
    #[arg(long)]
    pub r: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Relative objective change that stops the iterations.
    #[arg(long)]
    pub tol: Option<f64>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct FitArgs {
    /// Dataset CSV.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub penalty: PenaltyArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub solver: SolverArgs,
    /// Sparsity level, on the standardized scale of the data.
    #[arg(long)]
    pub lambda1: Option<f64>,
    /// Structure penalty level.
    #[arg(long)]
    pub lambda2: Option<f64>,
    /// proposed, HierMCP, SMCP or MA.
    #[arg(long, value_parser = parse_method)]
    pub method: Option<Method>,
    /// FDR level for MA.
    #[arg(long)]
    pub fdr: Option<f64>,
    /// Report file (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct GridArgs {
    #[arg(long)]
    pub n_lambda1: Option<usize>,
    /// Smallest lambda1 as a fraction of the largest.
    #[arg(long)]
    pub lambda1_min_ratio: Option<f64>,
    /// Explicit lambda2 values, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub lambda2: Option<Vec<f64>>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct TuneArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub penalty: PenaltyArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub grid: GridArgs,
    /// proposed, HierMCP or SMCP.
    #[arg(long, value_parser = parse_method)]
    pub method: Option<Method>,
    #[arg(long, value_enum)]
    pub criterion: Option<CriterionChoice>,
    /// Extended-BIC gamma.
    #[arg(long)]
    pub ebic_gamma: Option<f64>,
    /// Output directory for best.json and path.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct ScreenArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Number of G columns to keep.
    #[arg(long)]
    pub keep: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeChoice>,
    /// Reduced dataset CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Kept column indices and all p-values (JSON).
    #[arg(long)]
    pub map: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct BenchmarkArgs {
    /// Plan file (JSON, as written to plan.json by an earlier run).
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Scenario names, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub scenarios: Option<Vec<String>>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long, value_delimiter = ',', value_parser = parse_method)]
    pub methods: Option<Vec<Method>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub test_n: Option<usize>,
    #[arg(long)]
    pub n_lambda1: Option<usize>,
    /// spline, laplacian or none.
    #[arg(long, value_enum)]
    pub penalty: Option<PenaltyChoice>,
    #[arg(long)]
    pub alpha_cut: Option<f64>,
    #[arg(long)]
    pub fdr: Option<f64>,
    /// Output directory for plan.json, replicates.jsonl and table.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct StabilityArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub penalty: PenaltyArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub grid: GridArgs,
    #[arg(long, value_delimiter = ',', value_parser = parse_method)]
    pub methods: Option<Vec<Method>>,
    #[arg(long)]
    pub resamples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub fdr: Option<f64>,
    /// Report file (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn init_logging(cli: &Cli) {
    let level = if cli.quiet {
        "warn"
    } else {
        match cli.verbose {
            0 => "info",
            1 => "debug",
            _ => "trace",
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot start thread pool: {e}")))?;
    }
    let cfg = cli.config.as_deref();
    match &cli.command {
        Command::Simulate(a) => commands::simulate(&resolve(a, cfg, "simulate")?),
        Command::Fit(a) => commands::fit(&resolve(a, cfg, "fit")?),
        Command::Tune(a) => commands::tune(&resolve(a, cfg, "tune")?),
        Command::Screen(a) => commands::screen(&resolve(a, cfg, "screen")?),
        Command::Benchmark(a) => commands::benchmark(&resolve(a, cfg, "benchmark")?),
        Command::Stability(a) => commands::stability(&resolve(a, cfg, "stability")?),
    }
}

fn resolve<T>(flags: &T, cfg: Option<&std::path::Path>, section: &str) -> Result<T, CliError>
where
    T: Serialize + serde::de::DeserializeOwned + Default,
{
    let args = config::resolve(flags, cfg, section)?;
    log::info!("resolved config:\n{}", config::echo(section, &args).trim_end());
    Ok(args)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    init_logging(&cli);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
