//! Sparse patch tokenization and latent-memory transformers for event
//! camera streams.
//!
//! The pipeline runs per time window: events are accumulated in per-pixel
//! FIFOs ([`tokenizer`]), patches with enough fresh activity become tokens,
//! and a transformer ([`model`]) folds each window's tokens into a small set
//! of latent memory vectors. A classification head reads the memory after
//! any prefix of windows; a dense head rebuilds a per-pixel map (depth)
//! from the sparse tokens, dummy tokens and the memory.

pub mod events;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod profiler;
pub mod tokenizer;
pub mod trainer;
