//! Dataset ingestion, result reports, rank/z-score aggregation,
//! significance statistics and decision-grid export.

mod grid;
mod ingest;
mod report;
mod stats;

pub use grid::export_decision_grid;
pub use ingest::{load_csv, read_csv, write_csv, DEFAULT_SPLIT};
pub use report::{AlgorithmSummary, ExperimentReport, ResultRow};
pub use stats::{
    average_ranks, dataset_scores, friedman, holm, mean_rank_and_wins, significance_suite, wilcoxon, zscore_table,
    Friedman, PairwiseTest, SignificanceReport, Wilcoxon, ZSummary, ZTable, WILCOXON_EXACT_MAX,
};
