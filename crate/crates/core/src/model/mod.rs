//! Line recognizer: convolutional stem and transformer encoder, a linear
//! adapter, and an autoregressive transformer decoder. During pre-training a
//! linear projection head maps encoder states to codebook classes; it is
//! dropped afterwards.
//!
//! Parameters live in [`ModelParams`] under dotted names whose first segment
//! names the [`ParamGroup`]. Forward passes record onto a
//! [`Graph`](crate::tensorcore::Graph) through a [`Scope`], which decides per
//! group whether a tensor is trainable.

mod checkpoint;
mod config;
mod forward;
mod greedy;
mod params;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, RngState,
    FORMAT_VERSION, MAGIC,
};
pub use config::{
    count_decoder_params, count_encoder_params, count_params, AdapterConfig, DecoderConfig,
    EncoderConfig, ModelConfig, StemConfig,
};
pub use forward::{
    adapt, adapter_forward, decode, decoder_forward, encode, encoder_forward, positional_encoding,
    project, stem, EncoderOutput, Scope,
};
pub use greedy::{greedy_decode, greedy_decode_batch, greedy_ids};
pub use params::{build_model, GroupSet, ModelParams, ParamGroup};
