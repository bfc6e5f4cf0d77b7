//! Toy language-model training: a Markov corpus, AdamW with a warmup-cosine
//! schedule, metrics CSV, checkpoints, and the speed/quality table across runs.

mod corpus;
mod optim;
mod run;
mod tradeoff;

pub use corpus::{gen_corpus, MarkovChain, DEFAULT_CONCENTRATION};
pub use optim::{adamw_step, clip_scale, global_norm, lr_at, AdamState, AdamWConfig, Schedule, StepInfo};
pub use run::{read_metrics, train, DataConfig, MetricsRow, RunConfig, RunSummary, CONFIG_FILE, METRICS_FILE, SUMMARY_FILE};
pub use tradeoff::{tradeoff, write_tradeoff_csv, TradeoffRow};
