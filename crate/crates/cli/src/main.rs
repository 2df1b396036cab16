//! `stemfactor` command line: per-stage subcommands plus the batch `run`
//! pipeline driven by a TOML config or a previous run's manifest.

mod commands;

use clap::{Parser, Subcommand};

use stemfactor::pipeline::StageError;
use stemfactor::Error;

#[derive(Parser)]
#[command(
    name = "stemfactor",
    version,
    about = "NMF clustering of 4D-STEM stacks with automatic component selection"
)]
struct Cli {
    /// Worker thread cap for sweeps and pairwise metrics
    /// (env fallback: STEMFACTOR_THREADS). Results never depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic stack with known clusters and ground truth
    Generate(commands::GenerateArgs),
    /// Convert a stack between the container and npy formats
    Convert(commands::ConvertArgs),
    /// Apply the 3x3 scan-space mean filter
    Filter(commands::FilterArgs),
    /// Factorize for each k in a range and write the loss curve
    Sweep(commands::SweepArgs),
    /// Pick k: knee plus range from a loss curve, optionally IQA scoring
    Decide(commands::DecideArgs),
    /// Run a single NMF factorization
    Factorize(commands::FactorizeArgs),
    /// Build label, ratio and overlap maps from a saved factorization
    Maps(commands::MapsArgs),
    /// Run the full pipeline and write a reproducible manifest
    Run(commands::RunArgs),
    /// Run exactly one pipeline stage (debugging entry point)
    Stage {
        #[command(subcommand)]
        stage: StageCommand,
    },
}

#[derive(Subcommand)]
enum StageCommand {
    Filter(commands::FilterArgs),
    Sweep(commands::SweepArgs),
    Decide(commands::DecideArgs),
    Factorize(commands::FactorizeArgs),
    Maps(commands::MapsArgs),
}

/// Exit codes: 2 config, 3 data, 4 numerical, 5 I/O.
pub(crate) struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

pub(crate) fn exit_code(error: &Error) -> i32 {
    match error {
        Error::InvalidSpec(_) | Error::BadThresholds => 2,
        Error::IoFailure(_) => 5,
        Error::NonFinite { .. } | Error::KneeNotFound => 4,
        Error::SweepFailure { source, .. } => exit_code(source),
        _ => 3,
    }
}

impl From<Error> for CliError {
    fn from(error: Error) -> Self {
        Self {
            code: exit_code(&error),
            message: error.to_string(),
        }
    }
}

impl From<StageError> for CliError {
    fn from(error: StageError) -> Self {
        Self {
            code: exit_code(&error.source),
            message: error.to_string(),
        }
    }
}

fn init_threads(flag: Option<usize>) {
    let from_env = std::env::var("STEMFACTOR_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok());
    if let Some(n) = flag.or(from_env) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Generate(args) => commands::generate(&args),
        Command::Convert(args) => commands::convert(&args),
        Command::Filter(args) => commands::filter(&args),
        Command::Sweep(args) => commands::sweep(&args),
        Command::Decide(args) => commands::decide(&args),
        Command::Factorize(args) => commands::factorize(&args),
        Command::Maps(args) => commands::maps(&args),
        Command::Run(args) => commands::run(&args),
        Command::Stage { stage } => match stage {
            StageCommand::Filter(args) => commands::filter(&args),
            StageCommand::Sweep(args) => commands::sweep(&args),
            StageCommand::Decide(args) => commands::decide(&args),
            StageCommand::Factorize(args) => commands::factorize(&args),
            StageCommand::Maps(args) => commands::maps(&args),
        },
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    init_threads(cli.threads);
    if let Err(err) = dispatch(cli.command) {
        eprintln!("error: {}", err.message);
        std::process::exit(err.code);
    }
}
