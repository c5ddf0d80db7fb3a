//! Synthetic fine-tuning task, adapted model and optimizer.

mod model;
mod optim;
mod task;

pub use model::{mse, AdaptedModel, AdapterKind, SlotGrad};
pub use optim::{Optimizer, OptimizerKind, Schedule, TrainConfig};
pub use task::{Backbone, Split, SyntheticTask, TaskConfig, ROLES};
