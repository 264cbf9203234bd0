use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    encoder_block, Attention, Encoder, FeedForward, Graph, Init, LayerNorm, Linear,
    PositionalEncoding, PositionalMode, StackConfig,
};
use crate::tensor::Var;

/// EEG transformer at feature width followed by the projection to `d_model`.
/// Parameter names: `eeg_encoder.*`, `projection.*`.
#[derive(Debug, Clone)]
pub struct EegFrontEnd {
    pub pos: PositionalEncoding,
    pub encoder: Encoder,
    pub projection: Linear,
    pub feature_dim: usize,
}

impl EegFrontEnd {
    pub fn new<R: Rng>(
        init: &mut Init<'_, R>,
        feature_dim: usize,
        d_model: usize,
        max_len: usize,
        stack: StackConfig,
    ) -> Result<Self> {
        Ok(Self {
            pos: PositionalEncoding::new(init, "eeg_encoder.pos", PositionalMode::Sinusoidal, max_len, feature_dim),
            encoder: Encoder::new(init, "eeg_encoder", feature_dim, stack)?,
            projection: Linear::new(init, "projection", feature_dim, d_model),
            feature_dim,
        })
    }

    /// `features` is `(N+1) × feature_dim`; rows flagged in `hidden` are
    /// excluded as attention keys. Returns `(N+1) × d_model`.
    pub fn forward(&self, g: &mut Graph, features: Var, hidden: &[bool]) -> Result<Var> {
        let shape = g.shape(features).to_vec();
        if shape.len() != 2 || shape[1] != self.feature_dim || shape[0] != hidden.len() {
            return Err(Error::Dimension {
                op: "encode_eeg",
                lhs: shape,
                rhs: vec![hidden.len(), self.feature_dim],
            });
        }
        let x = self.pos.add_to(g, features)?;
        let h = self.encoder.forward(g, x, Some(hidden))?;
        self.projection.forward(g, h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Eeg,
    Text,
    Joint,
}

impl Stream {
    pub const ALL: [Stream; 3] = [Stream::Eeg, Stream::Text, Stream::Joint];

    pub fn name(self) -> &'static str {
        match self {
            Stream::Eeg => "eeg",
            Stream::Text => "text",
            Stream::Joint => "joint",
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone)]
struct StreamLayer {
    /// One attention/FFN pair when weights are shared, else one per stream.
    blocks: [Option<(Attention, FeedForward)>; 3],
    shared: Option<(Attention, FeedForward)>,
    norms: [Option<(LayerNorm, LayerNorm)>; 3],
}

/// Transformer layers applied separately to EEG, text and concatenated
/// sequences, with per-stream layer norms. Only the streams passed to
/// [`MultiStream::new`] get parameters.
#[derive(Debug, Clone)]
pub struct MultiStream {
    layers: Vec<StreamLayer>,
    final_norms: [Option<LayerNorm>; 3],
}

impl MultiStream {
    pub fn new<R: Rng>(
        init: &mut Init<'_, R>,
        d_model: usize,
        cfg: StackConfig,
        share_weights: bool,
        streams: &[Stream],
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let base = format!("multistream.layers.{i}");
            let block = |init: &mut Init<'_, R>, tag: &str| -> Result<(Attention, FeedForward)> {
                Ok((
                    Attention::new(init, &format!("{base}.{tag}.attn"), d_model, cfg.heads)?,
                    FeedForward::new(init, &format!("{base}.{tag}.ffn"), d_model, cfg.d_ff),
                ))
            };
            let mut layer = StreamLayer {
                blocks: [None, None, None],
                shared: None,
                norms: [None, None, None],
            };
            if share_weights {
                layer.shared = Some(block(init, "shared")?);
            }
            for &s in streams {
                if !share_weights {
                    layer.blocks[s.slot()] = Some(block(init, s.name())?);
                }
                layer.norms[s.slot()] = Some((
                    LayerNorm::new(init, &format!("{base}.{}.ln1", s.name()), d_model),
                    LayerNorm::new(init, &format!("{base}.{}.ln2", s.name()), d_model),
                ));
            }
            layers.push(layer);
        }
        let mut final_norms = [None, None, None];
        for &s in streams {
            final_norms[s.slot()] = Some(LayerNorm::new(
                init,
                &format!("multistream.{}.final_ln", s.name()),
                d_model,
            ));
        }
        Ok(Self { layers, final_norms })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        stream: Stream,
        mut x: Var,
        key_padding: Option<&[bool]>,
    ) -> Result<Var> {
        let missing = || Error::Contract(format!("stream {} was not built", stream.name()));
        for layer in &self.layers {
            let (attn, ffn) = layer
                .shared
                .as_ref()
                .or(layer.blocks[stream.slot()].as_ref())
                .ok_or_else(missing)?;
            let (ln1, ln2) = layer.norms[stream.slot()].as_ref().ok_or_else(missing)?;
            x = encoder_block(g, x, key_padding, (ln1, ln2), attn, ffn)?;
        }
        self.final_norms[stream.slot()]
            .as_ref()
            .ok_or_else(missing)?
            .forward(g, x)
    }
}
