//! `agop-bench`: generate, train, attribute, evaluate and report.

mod commands;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use agop_core::attribution::Method;
use agop_core::data::{Background, Scenario, DEFAULT_KAPPA};
use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "agop-bench", version, about = "AGOP attribution benchmark pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train.xtrb and test.xtrb for one scenario.
    Gen(GenArgs),
    /// Train the CNN, accumulating the AGOP diagonal along the way.
    Train(TrainArgs),
    /// Attribute one sample and dump the map as PGM.
    Attribute(AttributeArgs),
    /// Score attribution methods on a dataset and write a report CSV.
    Evaluate(EvaluateArgs),
    /// Show a report CSV, or the AGOP-Global mIoU of each snapshot.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long)]
    pub scenario: Scenario,
    #[arg(long, default_value = "uncorrelated")]
    pub background: Background,
    #[arg(long, default_value_t = 4000)]
    pub n_train: usize,
    #[arg(long, default_value_t = 2000)]
    pub n_test: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Signal strength; defaults depend on the scenario.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Modulation gain of the multiplicative scenario.
    #[arg(long, default_value_t = DEFAULT_KAPPA)]
    pub kappa: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite an existing output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory holding train.xtrb and test.xtrb.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory (defaults to the data directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub wd: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Steps between AGOP snapshots.
    #[arg(long, default_value_t = 100)]
    pub snapshot_every: u64,
    /// Accumulate only samples the model currently classifies correctly.
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    pub only_correct: bool,
    /// Train without the AGOP hook (no diag outputs).
    #[arg(long)]
    pub no_agop_hook: bool,
    /// Overwrite an existing model in the output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct AttributeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub diag: Option<PathBuf>,
    /// Dataset file (.xtrb).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub method: Method,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Directory for the PGM file.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub diag: Option<PathBuf>,
    /// Evaluation dataset file (.xtrb).
    #[arg(long)]
    pub data: PathBuf,
    /// Dataset whose pixel mean is the deletion/insertion baseline
    /// (defaults to train.xtrb next to --data).
    #[arg(long)]
    pub baseline_data: Option<PathBuf>,
    /// Comma-separated method names, or "all".
    #[arg(long, default_value = "all")]
    pub methods: String,
    /// Evaluate only the first N samples.
    #[arg(long)]
    pub n_eval: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scenario label for the report (read from the data manifest if omitted).
    #[arg(long)]
    pub scenario: Option<Scenario>,
    #[arg(long)]
    pub background: Option<Background>,
    /// Write 0 in the ms_per_sample column so reports compare byte for byte.
    #[arg(long)]
    pub no_timing: bool,
    /// Report CSV path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ReportFormat {
    Table,
    Csv,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Report CSV produced by `evaluate`.
    #[arg(long, conflicts_with = "snapshots")]
    pub input: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "table")]
    pub format: ReportFormat,
    /// Snapshot directory; prints `step,agop_global_miou`.
    #[arg(long, requires = "data")]
    pub snapshots: Option<PathBuf>,
    /// Dataset scored against each snapshot.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
    Core(agop_core::Error),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(agop_core::Error::Config(_)) => 2,
            CliError::Runtime(_) | CliError::Core(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<agop_core::Error> for CliError {
    fn from(e: agop_core::Error) -> Self {
        CliError::Core(e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => commands::gen(&a),
        Command::Train(a) => commands::train(&a),
        Command::Attribute(a) => commands::attribute(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Report(a) => commands::report(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
