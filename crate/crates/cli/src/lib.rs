//! Command-line pipeline: simulate, build cohorts, census, fit, predict
//! and plot.

pub mod commands;
pub mod failure;
pub mod manifest;
pub mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "illdeath", version, about = "Illness-death analyses of interval-censored onset with competing mortality")]
pub struct Cli {
    /// Worker threads for likelihood evaluation and resampling (0 = all cores)
    #[arg(long, global = true, env = "IDM_THREADS", hide_env_values = true, default_value_t = 0)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate exam rows and latent truth from known intensities
    Simulate(SimulateArgs),
    /// Apply the exclusion flowchart and derive one record per subject
    BuildCohorts(BuildCohortsArgs),
    /// Tabulate subject status at the horizon year per birth cohort
    Census(CensusArgs),
    /// Fit the illness-death model, optionally one fit per stratum
    Fit(FitArgs),
    /// Prevalence, cumulative risk and conditional-probability tables
    Predict(PredictArgs),
    /// Draw curves with 95% bands as SVG
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Simulation config (JSON)
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Random seed; overrides any seed in the config
    #[arg(long)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct BuildCohortsArgs {
    /// Exam-row CSV (one row per subject and exam)
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Cohort rules (JSON); built-in defaults when omitted
    #[arg(long)]
    pub rules: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CensusArgs {
    /// Subject records from build-cohorts
    #[arg(long)]
    pub subjects: PathBuf,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Cohort rules (JSON) supplying the window and horizon year
    #[arg(long)]
    pub rules: Option<PathBuf>,
    /// Calendar year of the census; defaults to the rules, then to the latest contact
    #[arg(long)]
    pub horizon_year: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Subject records from build-cohorts
    #[arg(long)]
    pub subjects: PathBuf,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Fit config (JSON); built-in defaults when omitted
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Fit separately per birth cohort (`cohort`) or per value of a covariate
    #[arg(long)]
    pub stratify_by: Option<String>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Fitted model from the fit command
    #[arg(long)]
    pub fit: PathBuf,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Conditioning age for prevalence and risk curves
    #[arg(long, default_value_t = 60.0)]
    pub base_age: f64,
    /// Evaluation ages as start:end:step
    #[arg(long, default_value = "60:95:1")]
    pub ages: String,
    /// Covariate profile as name=value pairs separated by commas; repeatable
    #[arg(long = "profile")]
    pub profiles: Vec<String>,
    /// Parameter draws for 95% bands (0 disables bands)
    #[arg(long, default_value_t = 1000)]
    pub draws: usize,
    /// Seed for the parameter draws
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Age standing in for "ever" in lifetime probabilities
    #[arg(long, default_value_t = 110.0)]
    pub lifetime_age: f64,
    /// Fixed-horizon cells ending after this age are left blank
    #[arg(long, default_value_t = 99.0)]
    pub limit_age: f64,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Curve CSV from the predict command
    #[arg(long)]
    pub curves: PathBuf,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Quantity to draw (e.g. prevalence, risk); all when omitted
    #[arg(long)]
    pub quantity: Option<String>,
}

pub fn run(cli: Cli) -> Result<(), failure::Failure> {
    if cli.threads > 0 {
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    }
    match cli.command {
        Command::Simulate(a) => commands::simulate(&a),
        Command::BuildCohorts(a) => commands::build_cohorts(&a),
        Command::Census(a) => commands::census(&a),
        Command::Fit(a) => commands::fit(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Plot(a) => commands::plot(&a),
    }
}

pub fn main_entry() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
