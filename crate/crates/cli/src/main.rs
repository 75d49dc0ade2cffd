//! `oehnn`: data generation, training, evaluation and diagnostics for
//! output-error Hamiltonian neural networks.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use oehnn::data::InitialState;
use oehnn::eval::Reference;
use oehnn::netmodel::ModelKind;

use config::SystemName;

/// Error caused by the invocation rather than the computation.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "oehnn", version, about = "Output-error Hamiltonian neural network experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a benchmark system and write a noisy dataset.
    GenerateData(GenerateArgs),
    /// Fit a model to a dataset.
    Train(TrainArgs),
    /// Score one or more models on the test split.
    Evaluate(EvaluateArgs),
    /// Roll out a model or the true system and write the trajectory.
    Simulate(SimulateArgs),
    /// Compare the analytic training gradient with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    system: Option<SystemName>,
    /// Master seed of the dataset.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    noise_variance: Option<f64>,
    #[arg(long)]
    amplitude: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// oe-hnn, hnn or mlp.
    #[arg(long, value_parser = parse_kind)]
    model: Option<ModelKind>,
    /// Output directory for the model, history and config echo.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Initialization seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Sub-rollout length for the simulation loss.
    #[arg(long)]
    chunk: Option<usize>,
    /// Train derivative-matching baselines on stored noiseless derivatives.
    #[arg(long)]
    oracle_derivatives: bool,
    /// Rollout start: known (noiseless) or measured.
    #[arg(long, value_parser = parse_initial)]
    initial_state: Option<InitialState>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Model files; one comparison row each.
    #[arg(long = "model", required = true, num_args = 1..)]
    models: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// RMSE against the true states or the measurements.
    #[arg(long, value_parser = parse_reference)]
    reference: Option<Reference>,
    #[arg(long, value_parser = parse_initial)]
    initial_state: Option<InitialState>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Model file to roll out.
    #[arg(long, conflicts_with = "true_system", required_unless_present = "true_system")]
    model: Option<PathBuf>,
    /// Roll out the true benchmark system instead of a model.
    #[arg(long, value_enum)]
    true_system: Option<SystemName>,
    /// Dataset whose trajectory supplies the input and initial state.
    #[arg(long, requires = "trajectory")]
    data: Option<PathBuf>,
    #[arg(long, requires = "data")]
    trajectory: Option<String>,
    #[arg(long, value_parser = parse_initial, default_value = "known")]
    initial_state: InitialState,
    /// Initial state as comma-separated values.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x0: Option<Vec<f64>>,
    /// Number of samples to produce.
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long, default_value_t = 0.01)]
    ts: f64,
    /// Multisine amplitude; 0 gives a zero input.
    #[arg(long, default_value_t = 0.0)]
    amplitude: f64,
    #[arg(long, default_value_t = 20)]
    harmonics: usize,
    #[arg(long, default_value_t = 0.1)]
    f0: f64,
    #[arg(long, default_value_t = 0)]
    input_seed: u64,
    /// Output CSV file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Rollout lengths for the coordinate-wise check.
    #[arg(long, value_delimiter = ',', default_values_t = [2usize, 10, 50])]
    steps: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    hidden: usize,
    #[arg(long, default_value_t = 500)]
    directional_steps: usize,
    #[arg(long, default_value_t = 200)]
    directional_hidden: usize,
    #[arg(long)]
    skip_directional: bool,
    #[arg(long, hide = true)]
    fault: Option<String>,
}

fn parse_kind(s: &str) -> Result<ModelKind, String> {
    s.parse::<ModelKind>().map_err(|e| e.to_string())
}

fn parse_reference(s: &str) -> Result<Reference, String> {
    s.parse::<Reference>().map_err(|e| e.to_string())
}

fn parse_initial(s: &str) -> Result<InitialState, String> {
    match s {
        "known" => Ok(InitialState::Known),
        "measured" => Ok(InitialState::Measured),
        other => Err(format!("unknown initial state {other:?}, expected known or measured")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenerateData(a) => commands::generate(a),
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
