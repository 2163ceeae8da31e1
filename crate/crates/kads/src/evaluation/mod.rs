//! Scoring and experiment harnesses.

pub mod experiments;
pub mod harness;
pub mod metrics;

pub use experiments::{
    ablation_suite, data_efficiency_sweep, git_describe, subsample_dialogues,
    t_interval_halfwidth, train_pipeline, AblationArm, AblationRow, AblationTable,
    PipelineConfig, RunManifest, SweepResult, SweepRow, SWEEP_BASELINE, SWEEP_KADS,
};
pub use harness::{
    doc_selection_with, eval_action_accuracy, eval_doc_selection, eval_examples, eval_ood,
    freq_acc_correlation, partition_by_holdout, predict, train_bslot_frequencies, BslotRow,
    EvalReport, LabelRule, OodEval, ReportTags, SystemKind, METRIC_NOTES,
};
pub use metrics::{action_accuracy, merge_summaries, pearson, AccuracySummary, BslotTally};
