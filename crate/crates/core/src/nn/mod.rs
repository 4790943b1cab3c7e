//! Layers, the two reference architectures, optimizers and the training loop.

mod layers;
mod model;
mod optim;
mod train;

pub use layers::{im2col, lower_kernel, unlower_kernel, Layer, LayerSpec};
pub use model::{lenet5, lenet_300_100, ModelGraph, ModelKind};
pub use optim::{LrSchedule, LrStep, OptimizerKind, OptimizerState};
pub use train::{train_steps, StepContext, StepHook, TrainConfig, TrainOutcome};
