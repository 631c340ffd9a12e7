//! Desk-scale two-branch embedding network.
//!
//! A convolutional stem feeds a texture branch and a minutiae branch. Each
//! branch produces an embedding with its own classifier; the minutiae branch
//! also predicts a minutiae map. Everything is generic over [`Real`] so the
//! same code runs in `f32` for training and `f64` for gradient checks.
//!
//! [`Real`]: crate::real::Real

mod checkpoint;
mod config;
mod distill;
pub mod layers;
mod model;
mod optim;
mod params;
mod train;

pub use checkpoint::{
    checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{LossWeights, NetConfig};
pub use distill::{
    distill, distill_from, distill_loss, distill_loss_and_grad, teacher_targets, DistillConfig, DistillReport,
};
pub use model::{
    backward, embed, extract_embedding, extract_embeddings, forward, loss, loss_and_grad, map_loss, Dropout,
    ForwardCache, LossBreakdown, SampleOutput, TrainBatch,
};
pub use optim::{cosine_lr, rmsprop_step, OptState};
pub use params::{Group, NetParams, ParamBlock};
pub use train::{augment, evaluate_loss, train, train_from, AugmentConfig, EpochStats, TrainConfig, TrainReport};
