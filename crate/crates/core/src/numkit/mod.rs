//! Dense tensors, reverse-mode differentiation and the layers built on them.

mod layers;
mod optim;
mod params;
mod rng;
mod tape;
mod tensor;

pub use layers::{
    block_forward, block_params, block_step, dropout, dropout_mask, dropout_tensor,
    embedding_table, layer_norm, linear, linear_params, mhsa, KvCache, LN_EPS,
};
pub use optim::{adamw_step, clip_global_norm, AdamState, AdamWConfig};
pub use params::{normal_init, xavier_uniform, LayerParams};
pub use rng::{Rng, RngState};
pub use tape::{gelu_scalar, Gradients, ParamVars, Tape, Var};
pub use tensor::Tensor;
