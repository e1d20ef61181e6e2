//! Benchmark harness: dataset loaders, metrics, the runner and its report.

mod dataset;
mod metrics;
mod report;
mod runner;

pub use dataset::{drop_gold_sql_timeouts, load_dataset, parse_dataset, BenchmarkItem, GoldSqlFilter, LoadError};
pub use metrics::{
    exact_match, exact_match_text, normalize_answer, quantile, rouge_l, rouge_l_tokens, split_values, spread, GoldAnswer,
    RougeScore, Spread, QUARTILE_CONVENTION,
};
pub use report::{
    Aggregates, GroupStats, ItemError, ItemResult, PrimaryMetric, ReportError, ReportHeader, RunReport, Verdict,
    WarmupSummary, REPORT_FORMAT_VERSION,
};
pub use runner::{run_benchmark, BenchmarkRun, RunOptions};
