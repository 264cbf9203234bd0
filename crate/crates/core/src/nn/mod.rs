//! Transformer building blocks over the tape.

mod gradcheck;
mod layers;
mod params;

pub use gradcheck::{input_gradcheck, param_gradcheck, ParamCheck};
pub use layers::{
    encoder_block, sinusoidal_table, Attention, AttnMask, DecoderLayer, Encoder, EncoderLayer,
    FeedForward, LayerNorm, Linear, PositionalEncoding, PositionalMode, StackConfig, LN_EPS,
};
pub use params::{Graph, Init, ParamId, ParamStore};
