//! Command-line front end for `dptails`.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dptails::dp_tails::{DEFAULT_SIGMA, DEFAULT_XI};
use dptails::Method;

mod commands;
pub mod config;
pub mod pipeline;

/// Exit code for success.
pub const EXIT_OK: i32 = 0;
/// Internal failure, or a verification that did not pass.
pub const EXIT_INTERNAL: i32 = 1;
/// I/O or configuration problem.
pub const EXIT_CONFIG: i32 = 2;
/// Input data violating a contract.
pub const EXIT_DATA: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "dptails", version, about = "Fair post-processing of regression scores above a threshold")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a transform on (score, group) rows and write it as JSON.
    Calibrate(CalibrateArgs),
    /// Apply a fitted transform to (score, group) rows.
    Transform(TransformArgs),
    /// Compute MSE, KS, tail-unfairness and threshold gaps.
    Evaluate(EvaluateArgs),
    /// Choose the unfairness proportion p for a fixed alpha.
    OptimizeP(OptimizeArgs),
    /// Run the full pipeline over a grid of alpha values and repetitions.
    Sweep(SweepArgs),
    /// Run the full pipeline on the synthetic model.
    Simulate(SimulateArgs),
    /// Check the closed-form solution against brute-force grid search.
    VerifyOracle(VerifyArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Grid,
    Brent,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Grid => Method::Grid,
            MethodArg::Brent => Method::Brent,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaseArg {
    Ols,
    /// The synthetic model's true regression function.
    Oracle,
}

#[derive(Debug, Clone, Args)]
pub struct InputArgs {
    /// CSV file with a header row.
    #[arg(long)]
    pub input: PathBuf,
    /// Column mapping: score=COL,group=COL[,target=COL].
    #[arg(long, default_value = "score=score,group=group")]
    pub schema: String,
}

#[derive(Debug, Clone, Args)]
pub struct FairnessArgs {
    /// Fairness threshold; `-inf` and `+inf` select the two baselines.
    #[arg(long, allow_hyphen_values = true, value_parser = config::parse_extended)]
    pub alpha: f64,
    /// Unfairness proportion; omitted means it is optimized.
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_XI)]
    pub xi: f64,
    /// Jitter half-width.
    #[arg(long, default_value_t = DEFAULT_SIGMA)]
    pub sigma: f64,
    #[arg(long, value_enum, default_value_t = MethodArg::Grid)]
    pub method: MethodArg,
}

#[derive(Debug, Clone, Args)]
pub struct SeedArg {
    #[arg(long, env = "DPTAILS_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub fairness: FairnessArgs,
    #[command(flatten)]
    pub seed: SeedArg,
    /// Transform file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TransformArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Transform file written by `calibrate`.
    #[arg(long)]
    pub transform: PathBuf,
    #[command(flatten)]
    pub seed: SeedArg,
    /// Output CSV; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Take alpha, p, xi and sigma from a transform file.
    #[arg(long, conflicts_with_all = ["alpha", "p"])]
    pub transform: Option<PathBuf>,
    #[arg(long, allow_hyphen_values = true, value_parser = config::parse_extended, required_unless_present = "transform")]
    pub alpha: Option<f64>,
    #[arg(long, required_unless_present = "transform")]
    pub p: Option<f64>,
    #[command(flatten)]
    pub seed: SeedArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, allow_hyphen_values = true, value_parser = config::parse_extended)]
    pub alpha: f64,
    #[arg(long, default_value_t = DEFAULT_SIGMA)]
    pub sigma: f64,
    #[arg(long, value_enum, default_value_t = MethodArg::Grid)]
    pub method: MethodArg,
    #[command(flatten)]
    pub seed: SeedArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SyntheticArgs {
    /// Calibration size N.
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    /// Test size M.
    #[arg(long, default_value_t = 10_000)]
    pub m: usize,
    /// Training size for the base regressor.
    #[arg(long, default_value_t = 10_000)]
    pub n_train: usize,
    #[arg(long, value_enum, default_value_t = BaseArg::Ols)]
    pub base: BaseArg,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Dataset CSV; the synthetic model is used when omitted.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Column mapping: score=COL|features=C1;C2, group=COL[, target=COL].
    #[arg(long, default_value = "score=score,group=group")]
    pub schema: String,
    #[command(flatten)]
    pub synthetic: SyntheticArgs,
    /// `start:stop:step` or a comma list (may include -inf, +inf).
    #[arg(long, allow_hyphen_values = true)]
    pub alphas: String,
    /// Fixed p; optimized per cell when omitted.
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_XI)]
    pub xi: f64,
    #[arg(long, default_value_t = DEFAULT_SIGMA)]
    pub sigma: f64,
    #[arg(long, value_enum, default_value_t = MethodArg::Grid)]
    pub method: MethodArg,
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    pub reps: u64,
    #[command(flatten)]
    pub seed: SeedArg,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub synthetic: SyntheticArgs,
    #[command(flatten)]
    pub fairness: FairnessArgs,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub reps: u64,
    #[command(flatten)]
    pub seed: SeedArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// Also write the first repetition's calibration data as CSV.
    #[arg(long)]
    pub data_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Number of random instances added to the fixed fixtures.
    #[arg(long, default_value_t = 20)]
    pub random: usize,
    /// Spacing of the candidate value grid.
    #[arg(long, default_value_t = dptails::oracle::DEFAULT_STEP)]
    pub step: f64,
    /// Pass tolerance; defaults to twice the grid step.
    #[arg(long)]
    pub tol: Option<f64>,
    #[command(flatten)]
    pub seed: SeedArg,
    /// Write the full reports as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Shift the closed form's upper branch by this amount (negative control).
    #[arg(long, hide = true, allow_hyphen_values = true)]
    pub inject_shift: Option<f64>,
}

/// Errors that map to [`EXIT_CONFIG`].
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// A check that ran to completion but did not pass.
#[derive(Debug)]
pub struct VerificationFailed(pub usize);

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} instance(s) failed verification", self.0)
    }
}

impl std::error::Error for VerificationFailed {}

/// Exit code for an error returned by a command.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<dptails::Error>() {
            use dptails::Error as E;
            return if e.is_data_contract() {
                EXIT_DATA
            } else {
                match e {
                    E::Io { .. }
                    | E::InvalidParameter { .. }
                    | E::MissingColumn(_)
                    | E::FormatVersion { .. }
                    | E::Json(_)
                    | E::Csv(_)
                    | E::InfeasibleGrid { .. }
                    | E::InvalidProportions { .. } => EXIT_CONFIG,
                    _ => EXIT_INTERNAL,
                }
            };
        }
        if cause.is::<ConfigError>() || cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return EXIT_CONFIG;
        }
        if cause.is::<VerificationFailed>() {
            return EXIT_INTERNAL;
        }
    }
    EXIT_INTERNAL
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Transform(a) => commands::transform(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::OptimizeP(a) => commands::optimize(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::VerifyOracle(a) => commands::verify_oracle(a),
    }
}
