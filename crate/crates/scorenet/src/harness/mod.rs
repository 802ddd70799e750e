//! Experiment harness: classification metrics, attention-pair budgets,
//! the training loop, and throughput benchmarks.

pub mod bench;
pub mod budget;
pub mod metrics;
pub mod train;

pub use bench::{bench_two_stage, bench_vanilla, throughput_bench, BenchResult, BENCH_CSV_HEADER};
pub use budget::{token_budget, TokenBudget};
pub use metrics::{knn_probe, metrics_csv, weighted_f1, MetricsRow};
pub use train::{
    cosine_lr, evaluate, train, train_with_progress, Augmentation, EvalResult, TrainConfig,
    TrainReport,
};
