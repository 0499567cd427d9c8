//! Desk-scale training harness for dual-adapter layers.

pub mod experiment;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod task;

pub use experiment::{
    build_model, layer_names, layer_seed, merge_probe_error, run_experiment, run_experiment_with_model, Snapshot,
    TrainConfig, TrainReport,
};
pub use gradcheck::{
    check_layer_gradients, finite_diff_check, FdOptions, FdReport, HalfSquaredLoss, LinearLoss, OutputLoss,
};
pub use model::{backward, flatten_grads, half_mse, DualMlp, LayerGrads, ParamVector};
pub use optim::{poly_lr, AdamWState};
pub use task::{gen_toy_task, gen_toy_task_with, TaskConfig, ToyTask};
