//! Command-line front end for the factor-model library: fit estimators to a
//! CSV panel, simulate calibrated panels, run Monte Carlo studies, pick the
//! number of factors, draw confidence bands, and fill in missing values.

mod commands;
mod config;
mod errors;
mod plot;
mod table;

use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use commands::Method;
use config::FileConfig;

#[derive(Parser)]
#[command(
    name = "dynfactor",
    version,
    about = "Approximate factor models: estimation, simulation, and inference"
)]
struct Cli {
    /// TOML file supplying defaults for any flag; explicit flags win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Estimate loadings, factors, and variances from a panel CSV.
    Fit(FitArgs),
    /// Draw one calibrated panel and dump it with its ground truth.
    Simulate(SimArgs),
    /// Replicate the estimator study and write MSE summary tables.
    Montecarlo(McArgs),
    /// Choose the number of factors by information criterion.
    Nfactors(NfArgs),
    /// Pointwise confidence bands for the common component.
    Bands(BandsArgs),
    /// Fill missing panel cells by EM over a state-space model.
    Impute(ImputeArgs),
}

#[derive(Args)]
struct FitArgs {
    /// Input panel CSV: header row names the series, first column is the
    /// time index, empty cells are missing.
    #[arg(long, short = 'i', value_name = "FILE")]
    input: Option<PathBuf>,
    /// Directory for output files (default ".").
    #[arg(long, short = 'o', value_name = "DIR")]
    output: Option<PathBuf>,
    /// Estimation route (default qml).
    #[arg(long, value_enum)]
    method: Option<Method>,
    /// Number of factors.
    #[arg(long, short = 'r')]
    r: Option<usize>,
    /// EM iteration cap (default 500 for qml, 200 for em).
    #[arg(long)]
    max_iter: Option<usize>,
    /// Relative log-likelihood stopping tolerance (default 1e-6).
    #[arg(long)]
    tol: Option<f64>,
    /// Write full-precision binary sidecars next to the rounded tables.
    #[arg(long)]
    sidecar: bool,
}

#[derive(Args)]
struct SimArgs {
    /// Directory for output files (default ".").
    #[arg(long, short = 'o', value_name = "DIR")]
    output: Option<PathBuf>,
    /// Cross-section size.
    #[arg(long)]
    n: Option<usize>,
    /// Number of time periods.
    #[arg(long)]
    t: Option<usize>,
    /// Number of factors.
    #[arg(long, short = 'r')]
    r: Option<usize>,
    /// Idiosyncratic cross-correlation decay in [0, 1) (default 0).
    #[arg(long)]
    tau: Option<f64>,
    /// Upper end of the idiosyncratic AR coefficient draw in [0, 1) (default 0).
    #[arg(long)]
    delta: Option<f64>,
    /// RNG seed (default built into the generator).
    #[arg(long)]
    seed: Option<u64>,
    /// Which replication of the seeded stream to dump (default 0).
    #[arg(long)]
    rep: Option<usize>,
}

#[derive(Args)]
struct McArgs {
    /// Directory for output files (default ".").
    #[arg(long, short = 'o', value_name = "DIR")]
    output: Option<PathBuf>,
    /// Cross-section size.
    #[arg(long)]
    n: Option<usize>,
    /// Number of time periods.
    #[arg(long)]
    t: Option<usize>,
    /// Number of factors.
    #[arg(long, short = 'r')]
    r: Option<usize>,
    /// Idiosyncratic cross-correlation decay in [0, 1) (default 0).
    #[arg(long)]
    tau: Option<f64>,
    /// Upper end of the idiosyncratic AR coefficient draw in [0, 1) (default 0).
    #[arg(long)]
    delta: Option<f64>,
    /// Number of replications (default 500).
    #[arg(long)]
    reps: Option<usize>,
    /// RNG seed (default built into the generator).
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated subset of ols,pc,qml,em (default all).
    #[arg(long)]
    estimators: Option<String>,
}

#[derive(Args)]
struct NfArgs {
    /// Input panel CSV.
    #[arg(long, short = 'i', value_name = "FILE")]
    input: Option<PathBuf>,
    /// Directory for the criteria table (default ".").
    #[arg(long, short = 'o', value_name = "DIR")]
    output: Option<PathBuf>,
    /// Largest candidate number of factors (default 8).
    #[arg(long)]
    r_max: Option<usize>,
}

#[derive(Args)]
struct BandsArgs {
    /// Input panel CSV (must be fully observed).
    #[arg(long, short = 'i', value_name = "FILE")]
    input: Option<PathBuf>,
    /// Directory for output files (default ".").
    #[arg(long, short = 'o', value_name = "DIR")]
    output: Option<PathBuf>,
    /// Number of factors.
    #[arg(long, short = 'r')]
    r: Option<usize>,
    /// Series to cover, comma separated (default all).
    #[arg(long, value_delimiter = ',')]
    series: Option<Vec<String>>,
    /// Coverage level in (0, 1) (default 0.95).
    #[arg(long)]
    level: Option<f64>,
    /// Half-band of the idiosyncratic covariance used in the variance
    /// estimate (default 0: diagonal).
    #[arg(long)]
    half_band: Option<usize>,
    /// Long-run variance bandwidth: "auto" or a non-negative integer.
    #[arg(long)]
    bandwidth: Option<String>,
    /// EM iteration cap for the underlying fit (default 500).
    #[arg(long)]
    max_iter: Option<usize>,
    /// Relative log-likelihood stopping tolerance (default 1e-6).
    #[arg(long)]
    tol: Option<f64>,
    /// Also write an SVG plot per covered series.
    #[arg(long)]
    plot: bool,
}

#[derive(Args)]
struct ImputeArgs {
    /// Input panel CSV with empty cells where values are missing.
    #[arg(long, short = 'i', value_name = "FILE")]
    input: Option<PathBuf>,
    /// Directory for the filled panel (default ".").
    #[arg(long, short = 'o', value_name = "DIR")]
    output: Option<PathBuf>,
    /// Number of factors.
    #[arg(long, short = 'r')]
    r: Option<usize>,
    /// EM iteration cap (default 200).
    #[arg(long)]
    max_iter: Option<usize>,
    /// Relative log-likelihood stopping tolerance (default 1e-8).
    #[arg(long)]
    tol: Option<f64>,
}

/// Honor `DYNFACTOR_THREADS` before any parallel region spins up the
/// default pool.
fn configure_threads() {
    #[cfg(feature = "parallel")]
    if let Ok(raw) = std::env::var("DYNFACTOR_THREADS") {
        match raw.parse::<usize>() {
            Ok(k) if k >= 1 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(k).build_global();
            }
            _ => eprintln!(
                "warning: ignoring DYNFACTOR_THREADS={raw:?} (expected a positive integer)"
            ),
        }
    }
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    configure_threads();
    let file_cfg = match &cli.config {
        Some(path) => match config::load(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return e.exit_code();
            }
        },
        None => FileConfig::default(),
    };
    let result = match cli.command {
        Cmd::Fit(a) => commands::cmd_fit(a, &file_cfg),
        Cmd::Simulate(a) => commands::cmd_simulate(a, &file_cfg),
        Cmd::Montecarlo(a) => commands::cmd_montecarlo(a, &file_cfg),
        Cmd::Nfactors(a) => commands::cmd_nfactors(a, &file_cfg),
        Cmd::Bands(a) => commands::cmd_bands(a, &file_cfg),
        Cmd::Impute(a) => commands::cmd_impute(a, &file_cfg),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn main() {
    std::process::exit(run());
}
