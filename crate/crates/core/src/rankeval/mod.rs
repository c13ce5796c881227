//! Ranking evaluation: TREC-format runs, rank-quality metrics, paired
//! significance testing, neural re-ranking, and the comparison report.

mod metrics;
mod rerank;
mod report;
mod run;
mod stats;

pub use metrics::{average_precision, mrr, ndcg_at, PerQuery};
pub use rerank::rerank;
pub(crate) use report::significance_mark;
pub use report::{evaluate, MetricRow, MetricsReport};
pub use run::RankedRun;
pub use stats::{paired_ttest, TTest};
