//! Sparse low-rank adaptation for frozen linear layers.
//!
//! A gated adapter adds `W_u diag(g) W_d x` to a frozen layer's output. The
//! factor matrices train by gradient descent while the gate vector `g` takes
//! proximal soft-threshold steps against an L1 penalty, so individual ranks
//! land on exact zeros; pruning then folds the surviving gates away and
//! shrinks the factors for good. On top of that sit a plain ungated baseline
//! (with an orthogonality-penalty alternative for step-cost comparisons), a
//! threshold schedule that sweeps sparsity levels while snapshotting
//! memorization/generalization metrics, and a deterministic experiment
//! harness with TOML specs, seeded runs, checkpoints, and CSV reports.

pub mod adapter;
pub mod baseline;
pub mod checkpoint;
pub mod error;
pub mod experiment;
pub mod model;
pub mod numerics;
pub mod prune;
pub mod schedule;
pub mod task;
pub mod train;

pub use adapter::{
    prox_gate_update, prox_objective, regularized_loss, soft_threshold, SoraAdapter,
};
pub use baseline::{orthogonality_penalty, LoraAdapter};
pub use checkpoint::{Checkpoint, CheckpointKind};
pub use error::{Error, Result};
pub use experiment::{
    compare_step_time, run_experiment, write_atomic, ExperimentOutcome, ExperimentSpec,
    SeedReport, TaskSpec, TimingReport,
};
pub use model::{Dataset, Layer, LayerAdapter, Targets, Task, TinyModel};
pub use numerics::{finite_diff_grad, numeric_rank, svd_values, Matrix, SeededRng, Vector};
pub use prune::{effective_rank, prune, prune_model, zero_index_set, PrunedAdapter, RankReport};
pub use schedule::{run_schedule, ScheduleConfig, ScheduleTrace, Snapshot};
pub use task::{gen_blob_task, gen_planted_task, blob_model, planted_model, BlobTask, PlantedTask};
pub use train::{
    count_nonzero_params, train_epoch, train_step, train_until_convergence, ConvergenceReport,
    OptimizerKind, OptimizerState, StepReport, TrainConfig,
};
