//! Optimization: AdamW with global-norm clipping, augmentation, batched
//! training with in-batch repetition, evaluation and resumable
//! checkpoints.
//!
//! Every random draw comes from a ChaCha8 generator keyed by the run seed,
//! a purpose tag and the global step, so a run resumed from a checkpoint
//! replays exactly the draws of an uninterrupted one. Within a step, batch
//! slot `s` and repetition `r` use key `s · repetitions + r`: one generator
//! for augmentation (crop, temporal span, drop-token, in that order) and
//! one for dropout.

mod augment;
mod checkpoint;
mod data;
mod eval;
mod fit;
mod optim;

pub use augment::{
    augment_stream, augment_windows, drop_tokens, sample_spatial_crop, sample_temporal_crop,
    AugmentConfig, SpatialCrop,
};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, OPTIMIZER_MAGIC,
};
pub use data::{split_indices, ClfDataset, ClfExample, DepthDataset, DepthExample};
pub use eval::{
    evaluate_clf, evaluate_clf_memoryless, evaluate_depth, evaluate_depth_constant, predict_clf,
};
pub use fit::{history_csv, EpochRecord, TrainConfig, Trainer, DEPTH_LEVEL_WEIGHT, SMALL_BATCH_LR};
pub use optim::{clip_gradients, AdamW, AdamWConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::ModelError;
use crate::objectives::ObjectiveError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite gradient in `{param}` at element {index} (step {step})")]
    NonFiniteGradient {
        param: String,
        index: usize,
        step: u64,
    },
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: u64, loss: f64 },
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) const TAG_SHUFFLE: u64 = 1;
pub(crate) const TAG_AUGMENT: u64 = 2;
pub(crate) const TAG_DROPOUT: u64 = 3;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for draw `(tag, a, b)` of the run with `seed`.
pub fn keyed_rng(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(splitmix(seed ^ splitmix(tag)) ^ a) ^ b))
}
