use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;

/// Compact captioning transformers on synthetic scenes: data generation,
/// vocabularies, training, captioning and parameter accounting.
#[derive(Debug, Parser)]
#[command(name = "acort", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate train/val/test scene files.
    GenData(GenDataArgs),
    /// Build a frequency-ranked word vocabulary from a scene file.
    BuildVocab(VocabArgs),
    /// Turn a caption into a token stream.
    Encode(EncodeArgs),
    /// Turn a token stream back into words.
    Decode(DecodeArgs),
    /// Train a captioner and write a model directory.
    Train(TrainArgs),
    /// Caption scenes with a trained model.
    Caption(CaptionArgs),
    /// Score a trained model on a scene file.
    Evaluate(EvaluateArgs),
    /// Count the parameters of one configuration.
    Count(CountArgs),
    /// Parameter counts for a suite of reference configurations.
    Tables(TablesArgs),
    /// Pairwise distances between the layers of a trained model.
    LayerDist(LayerDistArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Run config whose data section supplies defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Generator seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Training scenes.
    #[arg(long)]
    n_train: Option<usize>,
    /// Validation scenes.
    #[arg(long)]
    n_val: Option<usize>,
    /// Test scenes.
    #[arg(long)]
    n_test: Option<usize>,
    /// Directory for train.jsonl, val.jsonl and test.jsonl.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VocabArgs {
    /// Scene file (JSON lines).
    #[arg(long)]
    data: PathBuf,
    /// Words seen fewer times map to <UNK>.
    #[arg(long, default_value_t = 1)]
    min_frequency: u64,
    /// Vocabulary TSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    /// Vocabulary TSV.
    #[arg(long)]
    vocab: PathBuf,
    /// Radix base, or 0 for word-level ids.
    #[arg(long, default_value_t = 0)]
    radix_base: usize,
    /// Fail on words missing from the vocabulary instead of using <UNK>.
    #[arg(long)]
    strict: bool,
    /// Caption text.
    #[arg(required = true)]
    text: Vec<String>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// Vocabulary TSV.
    #[arg(long)]
    vocab: PathBuf,
    /// Radix base, or 0 for word-level ids.
    #[arg(long, default_value_t = 0)]
    radix_base: usize,
    /// Reject malformed streams instead of skipping what cannot be read.
    #[arg(long)]
    strict: bool,
    /// Decimal token ids.
    #[arg(required = true, allow_hyphen_values = true)]
    tokens: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides model.radix_base.
    #[arg(long)]
    radix_base: Option<usize>,
    /// Overrides train.epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Model directory to create.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CaptionArgs {
    /// Model directory written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Scene file; the run's test split when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Overrides eval.beam_size.
    #[arg(long)]
    beam_size: Option<usize>,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Model directory written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Scene file; the run's test split when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Overrides eval.beam_size.
    #[arg(long)]
    beam_size: Option<usize>,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CountArgs {
    /// Model or run config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides model.radix_base.
    #[arg(long)]
    radix_base: Option<usize>,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Suite {
    /// Model sizes, radix sweep, layer sharing, layer reuse and attention sharing.
    Paper,
}

#[derive(Debug, Args)]
pub struct TablesArgs {
    #[arg(long, value_enum, default_value = "paper")]
    suite: Suite,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LayerDistArgs {
    /// Model directory written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Directory for msd/rms/clipped CSV grids; stdout (MSD only) when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::BuildVocab(a) => commands::build_vocab(a),
        Command::Encode(a) => commands::encode(a),
        Command::Decode(a) => commands::decode(a),
        Command::Train(a) => commands::train(a),
        Command::Caption(a) => commands::caption(a),
        Command::Evaluate(a) => commands::evaluate_cmd(a),
        Command::Count(a) => commands::count(a),
        Command::Tables(a) => commands::tables(a),
        Command::LayerDist(a) => commands::layer_dist(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
