//! Noise-prediction training: losses, optimizer, learning-rate schedule
//! and the training loop.

mod config;
mod loss;
mod optim;
mod trainer;

pub use config::TrainConfig;
pub use loss::{pen_loss, pen_loss_var, stroke_loss, stroke_loss_var, PEN_CLAMP};
pub use optim::{clip_global_norm, lr_at, Adam, AdamConfig};
pub use trainer::{
    evaluate_loss, standard_normal, step_rng, train_step, EvalLoss, NoiseDraw, StepMetrics,
    Trainer,
};
