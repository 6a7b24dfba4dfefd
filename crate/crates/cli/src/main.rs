//! `berag`: generate synthetic data, train, decode, evaluate and benchmark
//! from the command line. Every artifact carries the run's config hash,
//! seed and tool version; a JSON summary goes to standard output.
//!
//! Exit codes: 0 success, 1 numerical failure, 2 usage, 3 schema or I/O,
//! 4 checkpoint, 5 items out of context length (partial results written).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use berag::BeragError;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "berag", version, about = "Ensemble retrieval-augmented decoding experiments")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// TOML file whose values override the flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Report directory; falls back to $BERAG_REPORT_DIR, then `reports`.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write train and test JSONL sets plus a manifest.
    GenData(GenDataArgs),
    /// Fine-tune a tiny backend and prior head with the ensemble loss.
    Train(TrainArgs),
    /// Decode a dataset; writes answers and per-step traces.
    Decode(DecodeArgs),
    /// Decode and score a dataset; writes the metric block as CSV.
    Eval(EvalArgs),
    /// Latency and attention cost per strategy, K and pruning setting.
    Bench(BenchArgs),
    /// Recall before and after reordering lists by prior score.
    Rerank(RerankArgs),
    /// Accuracy with the gold document moved through position buckets.
    PositionSweep(SweepArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Task {
    Kbqa,
    Needle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Distractors {
    Random,
    SharedEntity,
    SharedEntityAttribute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StrategyArg {
    Berag,
    Concat,
    AllDeflect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Pruning {
    On,
    Off,
    Both,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long, value_enum)]
    task: Task,
    /// Training items.
    #[arg(long, default_value_t = 2000)]
    items: usize,
    #[arg(long, default_value_t = 500)]
    test_items: usize,
    /// Retrieval list size (documents per item for the needle task).
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// List size of the test set; defaults to --k.
    #[arg(long)]
    test_k: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    gold_present_rate: f64,
    /// Defaults to --gold-present-rate.
    #[arg(long)]
    test_gold_present_rate: Option<f64>,
    #[arg(long, value_enum, default_value = "shared-entity-attribute")]
    distractors: Distractors,
    /// Pad documents to this length (0 leaves knowledge-base documents unpadded).
    #[arg(long, default_value_t = 0)]
    doc_len: usize,
    #[arg(long, default_value_t = 64)]
    vocab: usize,
    #[arg(long, default_value_t = 20)]
    entities: usize,
    #[arg(long, default_value_t = 8)]
    attributes: usize,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Continue from this checkpoint instead of a fresh model.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Checkpoint path; defaults to `checkpoint.json` in the report directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    k_train: usize,
    #[arg(long, default_value_t = 15)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, value_enum, default_value = "adam")]
    optimizer: Optimizer,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.01)]
    prior_lr: f64,
    /// Fraction of items whose gold document is replaced by the empty passage.
    #[arg(long, default_value_t = 0.0)]
    null_rate: f64,
    /// Append the empty passage to every training list.
    #[arg(long)]
    include_null_doc: bool,
    /// Add the relevance loss on the prior head.
    #[arg(long)]
    prior_loss: bool,
    #[arg(long, default_value_t = 1.0)]
    prior_weight: f64,
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Vocabulary of a fresh model; defaults to the largest token in the data plus one.
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long, default_value_t = 16)]
    dim: usize,
}

#[derive(Debug, Clone, Args)]
struct DecodeOpts {
    #[arg(long, value_enum, default_value = "berag")]
    strategy: StrategyArg,
    #[arg(long, default_value_t = 16)]
    k: usize,
    /// Top-P document pruning.
    #[arg(long)]
    prune: bool,
    /// Append the empty passage to each list.
    #[arg(long)]
    include_null_doc: bool,
    /// Deflect when the empty passage ends with the highest posterior (implies --include-null-doc).
    #[arg(long)]
    deflection: bool,
    #[arg(long, default_value_t = 8)]
    max_new_tokens: usize,
    /// Context window of the concatenated baseline, in tokens.
    #[arg(long, default_value_t = 4096)]
    context_limit: usize,
}

#[derive(Debug, Args)]
struct ModelInput {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Debug, Args)]
struct DecodeArgs {
    #[command(flatten)]
    input: ModelInput,
    #[command(flatten)]
    decode: DecodeOpts,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    input: ModelInput,
    #[command(flatten)]
    decode: DecodeOpts,
    /// Report Recall@K and the Strict RAG score.
    #[arg(long)]
    strict_rag: bool,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    input: ModelInput,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "berag")]
    strategies: Vec<StrategyArg>,
    #[arg(long = "k", value_delimiter = ',', default_values_t = [10, 50])]
    ks: Vec<usize>,
    #[arg(long, value_enum, default_value = "both")]
    pruning: Pruning,
    /// Items decoded once before measuring.
    #[arg(long, default_value_t = 16)]
    warmup: usize,
    #[arg(long, default_value_t = 8)]
    max_new_tokens: usize,
    #[arg(long, default_value_t = 4096)]
    context_limit: usize,
}

#[derive(Debug, Args)]
struct RerankArgs {
    #[command(flatten)]
    input: ModelInput,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 4, 16])]
    cutoffs: Vec<usize>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    input: ModelInput,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [StrategyArg::Berag, StrategyArg::Concat])]
    strategies: Vec<StrategyArg>,
    #[arg(long, default_value_t = 20)]
    k: usize,
    /// Positions per bucket.
    #[arg(long, default_value_t = 4)]
    width: usize,
    #[arg(long, default_value_t = 8)]
    max_new_tokens: usize,
    #[arg(long, default_value_t = 4096)]
    context_limit: usize,
}

/// A failed run: exit code and message.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

fn exit_code(e: &BeragError) -> u8 {
    match e {
        BeragError::Usage(_) => 2,
        BeragError::Schema(_) | BeragError::Io(_) | BeragError::Json(_) => 3,
        BeragError::Checkpoint(_) => 4,
        BeragError::OutOfLength { .. } => 5,
        BeragError::Item { source, .. } => exit_code(source),
        BeragError::Degenerate(_) | BeragError::Numeric { .. } | BeragError::Diverged { .. } => 1,
    }
}

impl From<BeragError> for Failure {
    fn from(e: BeragError) -> Self {
        Self {
            code: exit_code(&e),
            message: e.to_string(),
        }
    }
}

/// A finished run: its summary and exit code (0, or 5 for partial results).
pub struct Finished {
    pub summary: serde_json::Value,
    pub code: u8,
}

fn run(cli: Cli) -> Result<Finished, Failure> {
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::usage(format!("--threads: {e}")))?;
    }
    let file = config::FileConfig::load(cli.global.config.as_deref())?;
    let ctx = commands::Context {
        seed: file.seed(cli.global.seed),
        out_dir: config::report_dir(cli.global.out_dir.as_deref()),
        file,
    };
    match cli.command {
        Command::GenData(a) => commands::gen_data(&ctx, &a),
        Command::Train(a) => commands::train(&ctx, &a),
        Command::Decode(a) => commands::decode(&ctx, &a),
        Command::Eval(a) => commands::eval(&ctx, &a),
        Command::Bench(a) => commands::bench(&ctx, &a),
        Command::Rerank(a) => commands::rerank(&ctx, &a),
        Command::PositionSweep(a) => commands::position_sweep(&ctx, &a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(done) => {
            println!("{}", serde_json::to_string_pretty(&done.summary).expect("summary serializes"));
            ExitCode::from(done.code)
        }
        Err(f) => {
            eprintln!("berag: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
