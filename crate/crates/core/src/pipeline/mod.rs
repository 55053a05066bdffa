//! Two-stage training, the feature probe, evaluation and the ablation harness.

mod ablation;
mod config;
mod eval;
mod run;
mod train;

pub use ablation::{
    ablation_cells, benchmark_splits, dataset_hash, probe_split, run_ablation, AblationAxis,
    AblationCell, AblationRow, AblationTable, SeedResult,
};
pub use config::{RunConfig, StageOneLoss, Stages};
pub use eval::{accuracy_from_logits, classifier_accuracy, evaluate, Accuracy, EpochTrace, MetricsReport};
pub use run::{run_two_stage, write_file, MetricsDocument, RunOutcome, TableRow};
pub use train::{
    probe_features, random_feature_model, stage1_alpha, stage2_alpha, train_stage1, train_stage2,
    train_stage2_detailed, Stage2Extras,
};
