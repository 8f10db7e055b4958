//! `isothresh`: fit monotone step functions, invert them at a threshold,
//! plan and run adaptive two-stage designs, and drive the simulation harness.

mod cmds;
mod io;

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug)]
pub struct CliError {
    pub message: String,
    pub exit: u8,
}

impl CliError {
    pub fn validation(message: String) -> Self {
        Self { message, exit: 1 }
    }

    pub fn runtime(message: String) -> Self {
        Self { message, exit: 2 }
    }

    /// Core errors raised while checking inputs map to exit 1.
    pub fn from_validation(e: isothresh::Error) -> Self {
        Self::validation(e.to_string())
    }

    /// Core errors raised mid-computation map to exit 2.
    pub fn from_runtime(e: isothresh::Error) -> Self {
        Self::runtime(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "isothresh", version, about = "Isotonic threshold estimation and adaptive two-stage designs")]
struct Cli {
    /// Master seed for anything stochastic.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cap the worker thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// JSON file supplying subcommand options; explicit flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DistArg {
    #[value(alias = "z")]
    Chernoff,
    #[value(alias = "d")]
    LrLimit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FamilyArg {
    #[value(alias = "wald1", alias = "wald2")]
    Wald,
    Lr,
}

/// Table-cache flags shared by interval-producing subcommands.
#[derive(Args, Clone, Debug, Default)]
pub struct TableArgs {
    /// Cached Chernoff quantile table (JSON); embedded table otherwise.
    #[arg(long)]
    chernoff_table: Option<PathBuf>,
    /// Cached likelihood-ratio-limit table (JSON); embedded table otherwise.
    #[arg(long)]
    lr_limit_table: Option<PathBuf>,
}

#[derive(Args, Clone, Debug)]
pub struct FitArgs {
    /// CSV with columns x,y[,w].
    #[arg(long)]
    input: Option<PathBuf>,
    /// Design interval as `lo,hi` (inferred from the data otherwise).
    #[arg(long)]
    domain: Option<String>,
    /// Resolve duplicate covariates by seeded jitter of this size instead of pooling.
    #[arg(long)]
    jitter: Option<f64>,
    /// Fit a nonincreasing function (responses are negated internally).
    #[arg(long)]
    decreasing: bool,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args, Clone, Debug)]
pub struct CiArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    domain: Option<String>,
    #[arg(long)]
    jitter: Option<f64>,
    #[arg(long)]
    decreasing: bool,
    /// Response level whose crossing point is estimated.
    #[arg(long)]
    theta0: Option<f64>,
    /// Interval family.
    #[arg(long, value_enum)]
    family: Option<FamilyArg>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Variance override (estimated from the data otherwise).
    #[arg(long)]
    sigma2: Option<f64>,
    /// Slope override at the estimated threshold.
    #[arg(long)]
    deriv: Option<f64>,
    /// Design-density override at the estimated threshold.
    #[arg(long)]
    g: Option<f64>,
    #[arg(long)]
    grid_size: Option<usize>,
    #[command(flatten)]
    tables: TableArgs,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args, Clone, Debug)]
pub struct PlanArgs {
    /// Stage-one CSV data.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    domain: Option<String>,
    #[arg(long)]
    jitter: Option<f64>,
    #[arg(long)]
    theta0: Option<f64>,
    /// Stage-two sample size the interval must support.
    #[arg(long)]
    n2: Option<usize>,
    #[arg(long, value_enum)]
    family: Option<FamilyArg>,
    /// Stage-one interval miss probability.
    #[arg(long)]
    beta: Option<f64>,
    /// Use tabulated stage-one quantiles instead of the round conservative constants.
    #[arg(long)]
    tabulated_stage1: bool,
    #[arg(long)]
    sigma2: Option<f64>,
    #[arg(long)]
    deriv: Option<f64>,
    #[arg(long)]
    g: Option<f64>,
    #[arg(long)]
    grid_size: Option<usize>,
    #[command(flatten)]
    tables: TableArgs,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args, Clone, Debug)]
pub struct Run2Args {
    /// Simulated truth: sigmoid, quadratic or isosine.
    #[arg(long)]
    function: Option<String>,
    /// Noise standard deviation for the simulated oracle.
    #[arg(long)]
    sigma: Option<f64>,
    /// True threshold; with --function, theta0 defaults to m(d0).
    #[arg(long)]
    d0: Option<f64>,
    /// Finite population CSV to sample by nearest-covariate matching.
    #[arg(long)]
    population: Option<PathBuf>,
    #[arg(long)]
    jitter: Option<f64>,
    #[arg(long)]
    theta0: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_enum)]
    stage1: Option<FamilyArg>,
    #[arg(long, value_enum)]
    stage2: Option<FamilyArg>,
    #[arg(long)]
    domain: Option<String>,
    #[arg(long)]
    pooling_threshold: Option<usize>,
    #[arg(long)]
    grid_size: Option<usize>,
    #[arg(long)]
    stage1_grid_size: Option<usize>,
    #[arg(long)]
    tabulated_stage1: bool,
    /// Supply the true variance and slope instead of estimating them
    /// (simulated oracle with --d0 only).
    #[arg(long)]
    known_nuisance: bool,
    #[command(flatten)]
    tables: TableArgs,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args, Clone, Debug)]
pub struct SimulateArgs {
    /// Also write the coverage report as flat CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    tables: TableArgs,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args, Clone, Debug)]
pub struct EmulateArgs {
    /// Population CSV treated as the complete data set.
    #[arg(long)]
    population: Option<PathBuf>,
    #[arg(long)]
    domain: Option<String>,
    /// Jitter size for making covariates unique.
    #[arg(long)]
    jitter: Option<f64>,
    #[arg(long)]
    theta0: Option<f64>,
    #[arg(long)]
    budget: Option<usize>,
    /// Stage-one share for the two-stage procedures.
    #[arg(long)]
    p: Option<f64>,
    /// Comma-separated procedures (default: all five).
    #[arg(long)]
    procedures: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    pooling_threshold: Option<usize>,
    #[arg(long)]
    grid_size: Option<usize>,
    #[arg(long)]
    stage1_grid_size: Option<usize>,
    #[command(flatten)]
    tables: TableArgs,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args, Clone, Debug)]
pub struct TabulateArgs {
    #[arg(long, value_enum)]
    dist: Option<DistArg>,
    /// Monte Carlo paths (Chernoff).
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    half_width: Option<f64>,
    #[arg(long)]
    step: Option<f64>,
    /// Outer replicates (likelihood-ratio limit).
    #[arg(long)]
    outer: Option<usize>,
    #[arg(long)]
    inner_n: Option<usize>,
    /// Output file, or a directory receiving a cache file keyed by the
    /// tabulation parameters.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args, Clone, Debug)]
pub struct RatesArgs {
    /// Number of stages.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    gamma1: Option<f64>,
    /// Slack subtracted at each step of the exponent recursion.
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Isotonic least-squares fit of a CSV data set.
    Fit(FitArgs),
    /// One-stage confidence interval for the threshold on a CSV data set.
    Ci(CiArgs),
    /// Stage-two sampling interval from stage-one data.
    Plan(PlanArgs),
    /// Full adaptive two-stage run against a simulated or population oracle.
    Run2(Run2Args),
    /// Monte Carlo experiments (coverage, rate, derivative accuracy) from a config file.
    Simulate(SimulateArgs),
    /// Budgeted design emulation on a finite population.
    Emulate(EmulateArgs),
    /// Tabulate limit-distribution quantiles into a cache file.
    Tabulate(TabulateArgs),
    /// Multistage convergence-rate recursion.
    Rates(RatesArgs),
}

fn load_config_value(path: Option<&PathBuf>) -> Result<Option<serde_json::Value>, CliError> {
    match path {
        None => Ok(None),
        Some(p) => {
            let s = std::fs::read_to_string(p)
                .map_err(|e| CliError::validation(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&s)
                .map(Some)
                .map_err(|e| CliError::validation(format!("{}: bad JSON: {e}", p.display())))
        }
    }
}

/// Pull a field from the config file when the flag was not given.
pub fn cfg_field<T: serde::de::DeserializeOwned>(
    file: &Option<serde_json::Value>,
    key: &str,
) -> Option<T> {
    file.as_ref()
        .and_then(|v| v.get(key))
        .and_then(|v| serde_json::from_value(v.clone()).ok())
}

fn run() -> Result<(), CliError> {
    let cli = Cli::try_parse().map_err(|e| {
        // Let help/version print normally.
        use clap::error::ErrorKind;
        if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
            let _ = e.print();
            std::process::exit(0);
        }
        CliError::validation(e.to_string())
    })?;
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::validation("--threads must be positive".into()));
        }
        isothresh::exec::limit_threads(t)
            .map_err(|e| CliError::runtime(format!("thread pool: {e}")))?;
    }
    let file = load_config_value(cli.config.as_ref())?;
    let seed = cli.seed.or_else(|| cfg_field(&file, "seed")).unwrap_or(0);
    match cli.cmd {
        Cmd::Fit(a) => cmds::run_fit(a, &file, seed),
        Cmd::Ci(a) => cmds::run_ci(a, &file, seed),
        Cmd::Plan(a) => cmds::run_plan(a, &file, seed),
        Cmd::Run2(a) => cmds::run_run2(a, &file, seed),
        Cmd::Simulate(a) => cmds::run_simulate(a, &file, cli.seed.or_else(|| cfg_field(&file, "seed"))),
        Cmd::Emulate(a) => cmds::run_emulate(a, &file, seed),
        Cmd::Tabulate(a) => cmds::run_tabulate(a, &file, seed),
        Cmd::Rates(a) => cmds::run_rates(a, &file),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.exit)
        }
    }
}
