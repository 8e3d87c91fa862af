//! Stagewise training: configuration, per-component optimization, weight
//! selection, the boosting driver and checkpoints.

mod boosting;
mod checkpoint;
mod config;
mod optim;
mod rng;
mod stage;

pub use boosting::{run_boosting, validation_loss, BoostingRun, StageRecord};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION, MAGIC};
pub use config::{
    BoostSection, DataKind, DataSection, DeObjective, FixedTermName, FlowSection, ModeName, RhoStrategy, RunSection,
    Schedule, Task, TrainConfig, TrainSection,
};
pub use optim::{adam_step, clip_global_norm, cosine_lr, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use rng::{derived_rng, Purpose, RngDescriptor};
pub use stage::{
    architecture, refit_component, standard_normal_matrix, train_stage, EpochTrace, Problem, StageOptions, StageTrace,
};
