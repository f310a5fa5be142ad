//! Experiment orchestration: configuration, teacher pretraining,
//! distillation training, evaluation, hyperparameter sweeps, and report
//! aggregation. This is the reproducibility surface: a config plus a seed
//! determines every output bit-exactly.

mod config;
mod evaluate;
mod report;
mod sweep;
mod train;

pub use config::{
    apply_set_overrides, config_hash, load_config_value, resolve_config, DataSource, EvalConfig,
    ExperimentConfig, ModelDims, OptimizerConfig, TeacherConfig,
};
pub use evaluate::{evaluate, run_evaluate_to_dir};
pub use report::{write_report, ReportSummary};
pub use sweep::{run_sweep, SweepAxis, SweepOutcome, SweepRow};
pub use train::{
    distill_train, resolve_benchmark, run_distill_to_dir, run_teacher_to_dir, train_teacher,
    DistillOutcome, TeacherEpoch, TeacherRun, TrainedRun,
};
