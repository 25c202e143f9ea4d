//! Minimal feed-forward network engine.

pub mod arch;
pub mod checkpoint;
pub mod forward;
pub mod matrix;
pub mod optim;
pub mod params;
pub mod real;

pub use arch::{Activation, MlpArchitecture};
pub use checkpoint::{params_digest, sha256_hex, Checkpoint};
pub use forward::{
    backward, cross_entropy, evaluate, forward, predict_logits, recalibrate_batchnorm, softmax,
    update_running_stats, Backprop, BatchStats, ForwardOutput, LossAndAccuracy, Mode,
};
pub use matrix::Matrix;
pub use optim::{
    lr_at, optimizer_step, steps_per_epoch, train, train_from, EpochRecord, Optimizer, OptimizerKind,
    OptimizerState, Schedule, TrainConfig, TrainOutcome,
};
pub use params::{
    init_params, lerp_params, param_dot, param_norm, BatchNormLayer, DenseLayer, GradientTree, ModelParams,
};
pub use real::Real;
