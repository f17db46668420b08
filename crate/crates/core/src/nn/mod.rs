//! A small reverse-mode autodiff engine and the layers built on it.

mod adam;
mod kernels;
mod layers;
mod params;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use layers::{
    sinusoidal_positions, Conv1d, FeedForward, LayerNorm, Linear, MultiHeadAttention, TransformerBlock,
};
pub use params::{init, Param, ParamId, ParamStore};
pub use tape::{attention_probs, gelu, Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
