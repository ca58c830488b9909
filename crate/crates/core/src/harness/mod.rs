//! Configuration, training loops, ablations and reports.

mod config;
mod pipeline;
mod report;
mod train;

pub use config::{derive_seed, GatherSource, OptimizerConfig, RunConfig};
pub use pipeline::{
    ablate, ablate_with, accuracy, corpus_items, decode_all, gather_exact_match, predict, run_pipeline, score_predictions,
    split_corpus, sweep, trace_items, track_sample, train_gather, train_trace, transcribe, FitOutput, Pipeline, Prediction,
    Splits, TraceItem, ABLATION_ROWS,
};
pub use report::{AblationRow, AblationTable, ReportDelta, RunReport, TemplateScore};
pub use train::{train, EpochLog, TrainOutcome};
