//! Training, evaluation, ablation and reporting around the model and the
//! problem generator.

pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod metrics;
pub mod report;
pub mod train;

pub use checkpoint::Checkpoint;
pub use gradcheck::micro_gradcheck;
pub use config::{Ablation, Regime, TrainConfig, SEED_ENV};
pub use metrics::{EpochRecord, MetricsLog, StepRecord};
pub use report::{emit_report, panel_segmentation, render_problem, segmentation, slot_grid, SegmentationReport};
pub use train::{
    ablate, dual_train, evaluate, evaluate_with, learning_rate, pretrain_reconstruction, replicas, run_regime, train,
    train_with, AblationRun, EvalReport, ModelScorer, Prediction, ReplicaSummary, Scorer, TrainOptions, TrainOutcome,
    Trainer, EVAL_SEED,
};
