use std::path::PathBuf;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand, ValueEnum};
use riskner::optim::OptimizerKind;

#[derive(Debug, Parser)]
#[command(
    name = "riskner",
    version,
    about = "Supply-chain risk NER: corpus tools, training, tuning and reporting"
)]
pub struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fetch news articles into a deduplicated store. The API key is read
    /// from RISKNER_NEWS_API_KEY.
    Ingest(IngestArgs),
    /// Check a CoNLL corpus and print per-category entity counts.
    Validate(ValidateArgs),
    /// Split a corpus into train/validation/test files plus a manifest.
    Split(SplitArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint against an annotated corpus.
    Evaluate(EvaluateArgs),
    /// Run a hyper-parameter grid and summarize the trials.
    Tune(TuneArgs),
    /// Build the results table and F1 chart from evaluation outputs.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TokenizationArg {
    Word,
    Subword,
}

impl From<TokenizationArg> for riskner::corpus::Tokenization {
    fn from(t: TokenizationArg) -> Self {
        match t {
            TokenizationArg::Word => Self::Word,
            TokenizationArg::Subword => Self::Subword,
        }
    }
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Search keywords, comma separated (joined with OR).
    #[arg(long, value_delimiter = ',', required = true)]
    pub keywords: Vec<String>,
    /// First publication date, YYYY-MM-DD.
    #[arg(long)]
    pub from: NaiveDate,
    /// Last publication date, YYYY-MM-DD.
    #[arg(long)]
    pub to: NaiveDate,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..=100))]
    pub page_size: u64,
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    pub max_articles: u64,
    /// JSON field mapping for a different provider.
    #[arg(long)]
    pub mapping: Option<PathBuf>,
    /// JSON-lines article store, created if missing.
    #[arg(long)]
    pub store: PathBuf,
    /// Also write every stored article as pre-tokenized CoNLL (all labels O).
    #[arg(long)]
    pub conll: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    pub corpus: PathBuf,
    /// Comma-separated entity categories, in label order.
    #[arg(long, value_delimiter = ',')]
    pub entity_types: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    pub corpus: PathBuf,
    /// Train, validation and test fractions.
    #[arg(long, value_delimiter = ',', num_args = 1, default_value = "0.8,0.1,0.1", value_parser = fraction)]
    pub ratios: Vec<f64>,
    #[arg(long)]
    pub seed: u64,
    /// Comma-separated entity categories, in label order.
    #[arg(long, value_delimiter = ',')]
    pub entity_types: Option<Vec<String>>,
    /// Output directory for train.conll, validation.conll, test.conll and split.json.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

/// Training hyper-parameters shared by `train` and `tune`. Flags override
/// the config file, which overrides the built-in defaults.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// `key = value` file with any of: lr, batch_size, epochs, epsilon,
    /// optimizer, weight_decay, dropout_rate, max_len, seed, grad_clip.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, allow_negative_numbers = true, value_parser = positive)]
    pub lr: Option<f64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch_size: Option<u64>,
    #[arg(long, allow_negative_numbers = true, value_parser = positive)]
    pub epsilon: Option<f64>,
    #[arg(long, value_parser = parse_optimizer)]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long, allow_negative_numbers = true, value_parser = non_negative)]
    pub weight_decay: Option<f64>,
    #[arg(long, allow_negative_numbers = true, value_parser = dropout)]
    pub dropout: Option<f64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(3..))]
    pub max_len: Option<u64>,
    /// Global gradient-norm ceiling, or `none`.
    #[arg(long, allow_negative_numbers = true, value_parser = grad_clip)]
    pub grad_clip: Option<Clip>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Clip(pub Option<f64>);

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub validation: PathBuf,
    #[arg(long, value_enum, default_value_t = TokenizationArg::Word)]
    pub tokenization: TokenizationArg,
    /// Drop words seen fewer times than this in the training data.
    #[arg(long, default_value_t = 1)]
    pub min_freq: usize,
    #[arg(long, default_value_t = 30_000)]
    pub max_vocab: usize,
    /// Comma-separated entity categories, in label order.
    #[arg(long, value_delimiter = ',')]
    pub entity_types: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub hyper: ConfigArgs,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub seed: u64,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Run ledger (JSON lines) to append the run record to.
    #[arg(long)]
    pub runs: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Annotated CoNLL corpus to score against.
    #[arg(long)]
    pub data: PathBuf,
    /// Must match the tokenization used for training.
    #[arg(long, value_enum, default_value_t = TokenizationArg::Word)]
    pub tokenization: TokenizationArg,
    /// Run name used in reports; defaults to the checkpoint file stem.
    #[arg(long)]
    pub name: Option<String>,
    /// Write the metrics as JSON for `report`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub hyper: ConfigArgs,
    /// JSON grid with lr, epsilon, batch_size and optimizer lists;
    /// defaults to the standard 144-combination grid.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    /// Epoch budget per trial.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub epochs: u64,
    #[arg(long)]
    pub seed: u64,
    /// Concurrent trials; defaults to the number of available cores.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub workers: Option<u64>,
    /// Trial ledger (JSON lines); completed trials found here are skipped.
    #[arg(long, default_value = "trials.jsonl")]
    pub ledger: PathBuf,
    /// Model family name recorded in the ledger and summary.
    #[arg(long, default_value = "desk")]
    pub model_name: String,
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
    /// Summary CSV path.
    #[arg(long, default_value = "tuning_summary.csv")]
    pub summary: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Metrics files written by `evaluate --out`, in report order.
    #[arg(required = true)]
    pub metrics: Vec<PathBuf>,
    #[arg(long, default_value = "results.csv")]
    pub table: PathBuf,
    #[arg(long, default_value = "f1_chart.svg")]
    pub chart: PathBuf,
}

fn number(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err("must be finite".into())
    }
}

fn positive(s: &str) -> Result<f64, String> {
    let v = number(s)?;
    if v > 0.0 {
        Ok(v)
    } else {
        Err("must be greater than 0".into())
    }
}

fn non_negative(s: &str) -> Result<f64, String> {
    let v = number(s)?;
    if v >= 0.0 {
        Ok(v)
    } else {
        Err("must be at least 0".into())
    }
}

fn fraction(s: &str) -> Result<f64, String> {
    let v = number(s)?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err("must be in [0, 1]".into())
    }
}

fn dropout(s: &str) -> Result<f64, String> {
    let v = number(s)?;
    if (0.0..1.0).contains(&v) {
        Ok(v)
    } else {
        Err("must be in [0, 1)".into())
    }
}

fn grad_clip(s: &str) -> Result<Clip, String> {
    if s.eq_ignore_ascii_case("none") {
        Ok(Clip(None))
    } else {
        positive(s).map(|v| Clip(Some(v)))
    }
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind, String> {
    s.parse()
}
