//! Dense `f64` tensors, reverse-mode differentiation and the transformer
//! layers used by the models.

mod gradcheck;
mod layers;
mod params;
mod positional;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use layers::{
    dropout, AttentionBlock, FeedForward, ForwardCtx, LayerNorm, Linear, MultiHeadAttention, LN_EPS,
};
pub use params::{GradStore, ParamId, ParamStore};
pub use positional::{fourier_positions, FOURIER_BANDS};
pub use tape::{Fault, Gradients, Tape, Var, GATHER_NONE};
pub use tensor::{ShapeError, Tensor};
