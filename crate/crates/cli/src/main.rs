//! `beamtrack`: synthesize, split, train, evaluate and ingest beam-tracking datasets.
//!
//! Exit codes: 0 success, 1 usage, 2 data validation, 3 runtime.

mod commands;
mod ingest;
mod util;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use util::CliError;

#[derive(Parser, Debug)]
#[command(name = "beamtrack", version, about = "GPS-aided mmWave beam prediction and tracking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic drone-flight dataset.
    Synth(SynthArgs),
    /// Split a dataset and report per-split label distributions.
    Split(SplitArgs),
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Convert an external CSV layout into the canonical dataset format.
    Ingest(IngestArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output dataset CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Scenario JSON; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of flight sequences.
    #[arg(long)]
    pub sequences: Option<usize>,
    /// Samples per sequence.
    #[arg(long = "len")]
    pub seq_len: Option<usize>,
    /// Codebook size M.
    #[arg(long)]
    pub beams: Option<usize>,
    /// Sweep each sequence's sub-arc across the sector so labels drift with `q`.
    #[arg(long)]
    pub drift: bool,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// sequential or adjusted.
    #[arg(long, default_value = "adjusted")]
    pub method: String,
    /// Train, validation and test fractions.
    #[arg(long, value_delimiter = ',')]
    pub ratios: Option<Vec<f64>>,
    /// Candidate chunk sizes as fractions of the dataset.
    #[arg(long, value_delimiter = ',')]
    pub chunk_percentages: Option<Vec<f64>>,
    #[arg(long)]
    pub min_seq_len: Option<usize>,
    /// Codebook size when the dataset has no power columns.
    #[arg(long, default_value_t = 32)]
    pub beams: usize,
    /// Output manifest CSV.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory.
    #[arg(long, env = "BEAMTRACK_RUN_DIR", default_value = "run")]
    pub run_dir: PathBuf,
    /// Training options JSON (e.g. a previous run's config.json).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// sequential or adjusted.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub ratios: Option<Vec<f64>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// 1-based epochs at which the learning rate drops.
    #[arg(long, value_delimiter = ',')]
    pub lr_drops: Option<Vec<usize>>,
    /// best (lowest validation loss) or final.
    #[arg(long)]
    pub select: Option<String>,
    /// Fit normalization on train (default) or all samples.
    #[arg(long)]
    pub bounds: Option<String>,
    /// Decoder initial state: context or zero.
    #[arg(long)]
    pub decoder_h0: Option<String>,
    /// f64 or f32.
    #[arg(long, default_value = "f64")]
    pub precision: String,
    /// Codebook size when the dataset has no power columns.
    #[arg(long, default_value_t = 32)]
    pub beams: usize,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// train, val, test, or all.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Split manifest; defaults to split.csv beside the checkpoint.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Largest K in the per-step metrics table.
    #[arg(long, default_value_t = 5)]
    pub topk: usize,
    /// Output directory; defaults to eval-<split> beside the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON column mapping; flags override its entries.
    #[arg(long)]
    pub mapping: Option<PathBuf>,
    #[arg(long)]
    pub col_q: Option<String>,
    #[arg(long)]
    pub col_t: Option<String>,
    #[arg(long)]
    pub col_lat_bs: Option<String>,
    #[arg(long)]
    pub col_lon_bs: Option<String>,
    #[arg(long)]
    pub col_lat_ue: Option<String>,
    #[arg(long)]
    pub col_lon_ue: Option<String>,
    #[arg(long)]
    pub col_height: Option<String>,
    #[arg(long)]
    pub col_beam: Option<String>,
    /// Power columns are those named <prefix><index>.
    #[arg(long)]
    pub power_prefix: Option<String>,
    /// Explicit power columns in beam order.
    #[arg(long, value_delimiter = ',')]
    pub power_cols: Option<Vec<String>>,
    /// Index of the first beam in the input.
    #[arg(long)]
    pub beam_base: Option<usize>,
    /// Codebook size when there are no power columns.
    #[arg(long, default_value_t = 32)]
    pub beams: usize,
    /// Abort on the first invalid row.
    #[arg(long)]
    pub strict: bool,
    #[arg(long)]
    pub force: bool,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Split(a) => commands::split(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ingest(a) => ingest::run(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
