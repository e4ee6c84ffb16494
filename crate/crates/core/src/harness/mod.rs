//! Synthetic data, training, evaluation, ablations and latency benchmarks.

pub mod ablation;
pub mod bench;
pub mod metrics;
pub mod synth;
pub mod train;

pub use ablation::{run_ablation, AblationReport, AblationRow, AblationRunner, Study};
pub use bench::{bench, BenchConfig, BenchReport};
pub use metrics::{median_rank, ndcg_at_10, recall_at_k, Metrics};
pub use synth::{gen_synth, Qrels, Split, SynthConfig, SynthDataset, SynthQuery};
pub use train::{evaluate, train_toy, ModeMetrics, TrainConfig, TrainOutcome, TrainReport, TrainSimilarity, EVAL_MODES};
