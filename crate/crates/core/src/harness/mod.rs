//! Synthetic datasets, evaluation metrics and the analysis experiments:
//! gold-position sweeps, deflection scoring, prior reranking and latency.

mod bench;
mod data;
mod eval;
mod kb;
mod needle;
mod rerank;
mod sweep;

pub use bench::{bench_latency, loglog_slope, BenchResult, BenchRow, BenchVariant};
pub use data::{from_jsonl, read_jsonl, to_jsonl, write_jsonl};
pub use eval::{
    decode_item, evaluate, gold_position, recall_at_k, relevance_accuracy, summarize, Confusion, EvalReport,
    ItemOutcome, Ratio, Strategy,
};
pub use kb::{gen_kbqa, DistractorLevel, Fact, GoldRank, KbConfig, ScenarioConfig, SyntheticKb, EOS, FILLER, NEG};
pub use needle::{digits, gen_needle, needle_oracle, NEEDLE_LEN, SEP};
pub use rerank::{rank_by_score, rerank_recall, rerank_with_prior, RerankReport};
pub use sweep::{position_buckets, position_sweep, SweepReport, SweepRow};
