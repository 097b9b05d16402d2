//! The retrieval tuner: an optional reduction MLP followed by a stack of
//! blocks, each with self bi-attention, cross bi-attention and a
//! feed-forward layer.

mod checkpoint;
mod config;
mod model;
mod params;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use config::{count_params, ConnectionMode, Reduction, TunerConfig};
pub use model::{
    cross_bi_attention, encode, encode_with_tape, masked_mean, reduce_dims, self_bi_attention, tuner_backward,
    tuner_forward, AttentionCache, BlockCache, ForwardTape, OutputGrad,
};
pub use params::{
    AttentionParams, BlockParams, FeedForwardParams, LayerNormParams, ReductionParams, TunerParams,
};
