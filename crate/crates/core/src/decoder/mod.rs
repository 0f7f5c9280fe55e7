//! Query-point detection transformer: positional encoding, group-wise
//! self-attention, deformable point-voxel cross-attention, per-layer heads
//! with iterative point refinement, and cross-layer averaging.

mod attn;
mod boxes;
mod model;
mod nn;
mod pe;

pub use attn::{group_mask, group_self_attn, DeformAttn, DeformAttnCfg, SelfAttn, MASK_NEG};
pub use boxes::{decode_box, encode_box, normalized_params, MIN_EXTENT, REG_DIM};
pub use model::{
    aggregate_layers, DecoderConfig, DecoderLayer, Detector, ForwardOut, Heads, LayerOut, ModelConfig, Preds, PreparedScene, QueryInput,
    SetSpan,
};
pub use nn::{LayerNorm, Linear, Mlp};
pub use pe::{positional_encoding, positional_encoding_graph};

#[cfg(test)]
mod tests;
