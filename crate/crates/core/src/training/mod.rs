//! Desk-scale data-parallel training harness.

pub mod data;
pub mod distributed;
pub mod model;
pub mod optim;

pub use data::{make_dataset, partition, Dataset, DatasetKind};
pub use distributed::{
    distributed_step, train, train_on, ModelSpec, Precision, StepOptions, StepRecord, StepReport, TrainConfig,
    TrainResult,
};
pub use model::{finite_difference_gradient, Batch, Model, ModelKind};
pub use optim::{trust_ratio, LrSchedule, OptimizerKind, OptimizerState};
