mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fewer::error::ErrorKind;

use crate::config::Settings;

/// WER estimation from speech and hypothesis embeddings.
#[derive(Debug, Parser)]
#[command(name = "fewer", version)]
struct Cli {
    /// `key = value` file; flags override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Score hypotheses against references into a scored JSONL manifest.
    Score(ScoreArgs),
    /// Filter by duration, balance zero-WER pairs, and print dataset statistics.
    Curate(CurateArgs),
    /// Train an estimator on scored train/dev manifests.
    Train(TrainArgs),
    /// Write per-utterance WER estimates.
    Predict(PredictArgs),
    /// Compare estimates with scored targets.
    Eval(EvalArgs),
    /// Time single-stream inference and report real-time factor.
    Bench(BenchArgs),
    /// Generate a synthetic dataset with a known target function.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Clamp WER into [0, 1].
    #[arg(long)]
    pub clamp: Option<bool>,
    #[arg(long)]
    pub lowercase: Option<bool>,
    /// Per-record failures; defaults to `<out>.errors.jsonl`.
    #[arg(long)]
    pub errors: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CurateArgs {
    /// Scored manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Longest retained utterance in seconds (inclusive).
    #[arg(long = "max-dur")]
    pub max_dur: Option<f64>,
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the statistics table here.
    #[arg(long)]
    pub stats: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// Speech aggregator: avg or bilstm.
    #[arg(long)]
    pub agg: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Cosine schedule length in epochs.
    #[arg(long)]
    pub tmax: Option<usize>,
    #[arg(long = "max-epochs")]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated seeds; writes `<out>.seed<k>` per seed.
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-epoch loss CSV; defaults to `<out>.history.csv`.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// fewer, cs (1 - mean log-prob) or cs-prob (1 - exp mean log-prob).
    #[arg(long)]
    pub method: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub scored: Option<PathBuf>,
    /// JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// System label in the printed table.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long = "hist-csv")]
    pub hist_csv: Option<PathBuf>,
    #[arg(long = "speaker-csv")]
    pub speaker_csv: Option<PathBuf>,
    /// SVG histogram of targets and estimates.
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub warmup: Option<usize>,
    /// f64 or f32.
    #[arg(long)]
    pub precision: Option<String>,
    /// Also run multi-worker throughput mode with this many threads.
    #[arg(long)]
    pub workers: Option<usize>,
    /// JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Earlier JSON report to compare against.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub dev: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
    #[arg(long = "speech-dim")]
    pub speech_dim: Option<usize>,
    #[arg(long = "text-dim")]
    pub text_dim: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Lib(fewer::Error),
}

impl From<fewer::Error> for CliError {
    fn from(e: fewer::Error) -> Self {
        CliError::Lib(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 3,
            CliError::Lib(e) => match e.kind() {
                ErrorKind::Data => 2,
                ErrorKind::Config => 3,
                ErrorKind::Numeric => 4,
            },
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(3) } else { ExitCode::SUCCESS };
        }
    };
    let result = Settings::load(cli.config.as_deref()).and_then(|mut settings| match cli.command {
        Command::Score(a) => commands::score(a, &mut settings),
        Command::Curate(a) => commands::curate(a, &mut settings),
        Command::Train(a) => commands::train(a, &mut settings),
        Command::Predict(a) => commands::predict(a, &mut settings),
        Command::Eval(a) => commands::eval(a, &mut settings),
        Command::Bench(a) => commands::bench(a, &mut settings),
        Command::Synth(a) => commands::synth(a, &mut settings),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
