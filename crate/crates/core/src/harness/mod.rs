//! Experiment orchestration: configuration, the training loop, evaluation,
//! parameter sweeps and run-directory outputs.

pub mod config;
pub mod output;
pub mod sweep;
pub mod train;

pub use config::{DataSource, Disabled, Mode, P2pCenter, TrainConfig};
pub use output::{emit_outputs, metrics_from_files, write_report};
pub use sweep::{emit_sweep, sweep, SweepParam, SweepRow};
pub use train::{
    build_datasets, build_objective, effective_alpha, effective_eta, evaluate, run_train, run_train_on, step_gradients,
    Accuracy, Component, EpochLog, Groups, LossLog, RunOutput, RunStatus, StepInput,
};
