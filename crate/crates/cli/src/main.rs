mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use segslu::stream::Alignment;
use segslu::train::CmvnKind;

/// Streaming convolutional intent classifier.
#[derive(Debug, Parser)]
#[command(name = "segslu", version)]
pub struct Cli {
    /// Output format for results on stdout.
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AlignArg {
    Free,
    Stride16,
}

impl From<AlignArg> for Alignment {
    fn from(a: AlignArg) -> Self {
        match a {
            AlignArg::Free => Alignment::Free,
            AlignArg::Stride16 => Alignment::Stride16,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic tone-motif corpus.
    GenToy(GenToyArgs),
    /// Train on a manifest and write a weight file.
    Train(TrainArgs),
    /// Error rate of a weight file on one split of a manifest.
    Eval(EvalArgs),
    /// Classify WAV files, whole or segment by segment.
    Classify(ClassifyArgs),
    /// Error rate for every (segment, step) pair of a grid.
    Sweep(SweepArgs),
    /// Time the work left after the last sample, streaming vs whole signal.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct GenToyArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    #[arg(long, default_value_t = 100)]
    pub per_class: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// none, global (statistics from <weights>.cmvn) or utterance.
    #[arg(long, default_value = "global")]
    pub cmvn: CmvnKind,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output weight file; global CMVN statistics go to <weights>.cmvn.
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long, default_value = "global")]
    pub cmvn: CmvnKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    /// Per-epoch metrics CSV [default: <weights>.metrics.csv].
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Ignored for manifests without a split column.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Segment length in seconds; with --step, classify segment by segment.
    #[arg(long, requires = "step")]
    pub segment: Option<f64>,
    #[arg(long, requires = "segment")]
    pub step: Option<f64>,
    #[arg(long, value_enum, default_value_t = AlignArg::Free)]
    pub align: AlignArg,
    #[arg(required = true)]
    pub files: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Segment lengths in seconds.
    #[arg(long = "segment", value_delimiter = ',', default_value = "1,1.25,1.5,1.75,2")]
    pub segments: Vec<f64>,
    /// Step lengths in seconds.
    #[arg(long = "step", value_delimiter = ',', default_value = "0.25,0.5,0.75,1,1.25,1.5")]
    pub steps: Vec<f64>,
    #[arg(long, value_enum, default_value_t = AlignArg::Free)]
    pub align: AlignArg,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Segment length in seconds [default: both reference settings].
    #[arg(long, requires = "step")]
    pub segment: Option<f64>,
    #[arg(long, requires = "segment")]
    pub step: Option<f64>,
    /// WAV file to stream; a synthetic toy utterance otherwise.
    #[arg(long)]
    pub audio: Option<PathBuf>,
    /// Length of the synthetic utterance in seconds.
    #[arg(long, default_value_t = 3.0)]
    pub duration: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<commands::UsageError>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
