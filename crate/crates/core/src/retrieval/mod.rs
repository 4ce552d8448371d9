//! Datasets, balanced pair sampling, ranking and mAP evaluation.

mod dataset;
mod eval;
mod pairs;

pub use dataset::Dataset;
pub use eval::{
    average_precision, average_precision_flags, mean_average_precision, mean_average_precision_with, rank,
    render_table, EvalReport, FnScorer, QueryAp, RankedList, Scorer,
};
pub use pairs::{sample_balanced_pairs, sample_balanced_pairs_from, Pair, PairBatch};
