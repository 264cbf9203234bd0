use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{Graph, Init, ParamId};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, d_in: usize, d_out: usize) -> Self {
        Self {
            weight: init.xavier(&format!("{name}.weight"), d_in, d_out),
            bias: init.zeros(&format!("{name}.bias"), &[d_out]),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w)?;
        g.add_row_bias(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, d: usize) -> Self {
        Self {
            gamma: init.ones(&format!("{name}.gamma"), &[d]),
            beta: init.zeros(&format!("{name}.beta"), &[d]),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub d_model: usize,
    pub n_heads: usize,
}

/// Which keys a query may not attend to.
#[derive(Debug, Clone, Copy, Default)]
pub struct AttnMask<'a> {
    /// `true` marks a key position to exclude.
    pub key_padding: Option<&'a [bool]>,
    pub causal: bool,
}

impl Attention {
    pub fn new<R: Rng>(
        init: &mut Init<'_, R>,
        name: &str,
        d_model: usize,
        n_heads: usize,
    ) -> Result<Self> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(Error::Config(format!(
                "{name}: d_model {d_model} not divisible by {n_heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(init, &format!("{name}.q"), d_model, d_model),
            k: Linear::new(init, &format!("{name}.k"), d_model, d_model),
            v: Linear::new(init, &format!("{name}.v"), d_model, d_model),
            o: Linear::new(init, &format!("{name}.o"), d_model, d_model),
            d_model,
            n_heads,
        })
    }

    pub fn forward(&self, g: &mut Graph, query: Var, kv: Var, mask: AttnMask) -> Result<Var> {
        Ok(self.forward_with_weights(g, query, kv, mask)?.0)
    }

    /// Also returns the per-head attention probability tensors (`T×S` each).
    pub fn forward_with_weights(
        &self,
        g: &mut Graph,
        query: Var,
        kv: Var,
        mask: AttnMask,
    ) -> Result<(Var, Vec<Var>)> {
        let t = g.shape(query)[0];
        let s = g.shape(kv)[0];
        let excluded = build_exclusion(t, s, mask)?;
        let q = self.q.forward(g, query)?;
        let k = self.k.forward(g, kv)?;
        let v = self.v.forward(g, kv)?;
        let dh = self.d_model / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        let mut weights = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let (qh, kh, vh) = if self.n_heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, dh)?,
                    g.slice_cols(k, h * dh, dh)?,
                    g.slice_cols(v, h * dh, dh)?,
                )
            };
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let p = g.softmax_masked(scores, excluded.as_deref())?;
            weights.push(p);
            heads.push(g.matmul(p, vh)?);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        Ok((self.o.forward(g, merged)?, weights))
    }
}

fn build_exclusion(t: usize, s: usize, mask: AttnMask) -> Result<Option<Vec<bool>>> {
    if mask.key_padding.is_none() && !mask.causal {
        return Ok(None);
    }
    if let Some(p) = mask.key_padding {
        if p.len() != s {
            return Err(Error::Dimension {
                op: "attention key padding",
                lhs: vec![s],
                rhs: vec![p.len()],
            });
        }
    }
    let mut ex = vec![false; t * s];
    for i in 0..t {
        for j in 0..s {
            let padded = mask.key_padding.is_some_and(|p| p[j]);
            ex[i * s + j] = padded || (mask.causal && j > i);
        }
        if ex[i * s..(i + 1) * s].iter().all(|&e| e) {
            return Err(Error::Contract(format!(
                "attention query {i} has no admissible key"
            )));
        }
    }
    Ok(Some(ex))
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, d_model: usize, d_ff: usize) -> Self {
        Self {
            fc1: Linear::new(init, &format!("{name}.fc1"), d_model, d_ff),
            fc2: Linear::new(init, &format!("{name}.fc2"), d_ff, d_model),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Width and depth of a transformer stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackConfig {
    pub layers: usize,
    pub d_ff: usize,
    pub heads: usize,
}

/// Pre-norm encoder layer: `x + Attn(LN(x))`, then `+ FFN(LN(·))`.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new<R: Rng>(
        init: &mut Init<'_, R>,
        name: &str,
        d_model: usize,
        d_ff: usize,
        heads: usize,
    ) -> Result<Self> {
        if d_ff == 0 {
            return Err(Error::Config(format!("{name}: d_ff must be positive")));
        }
        Ok(Self {
            ln1: LayerNorm::new(init, &format!("{name}.ln1"), d_model),
            attn: Attention::new(init, &format!("{name}.attn"), d_model, heads)?,
            ln2: LayerNorm::new(init, &format!("{name}.ln2"), d_model),
            ffn: FeedForward::new(init, &format!("{name}.ffn"), d_model, d_ff),
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, key_padding: Option<&[bool]>) -> Result<Var> {
        encoder_block(
            g,
            x,
            key_padding,
            (&self.ln1, &self.ln2),
            &self.attn,
            &self.ffn,
        )
    }
}

/// Pre-norm residual block with externally supplied norms, so that one
/// attention/FFN pair can run under several sets of normalization parameters.
pub fn encoder_block(
    g: &mut Graph,
    x: Var,
    key_padding: Option<&[bool]>,
    norms: (&LayerNorm, &LayerNorm),
    attn: &Attention,
    ffn: &FeedForward,
) -> Result<Var> {
    let h = norms.0.forward(g, x)?;
    let a = attn.forward(
        g,
        h,
        h,
        AttnMask {
            key_padding,
            causal: false,
        },
    )?;
    let x = g.add(x, a)?;
    let h = norms.1.forward(g, x)?;
    let f = ffn.forward(g, h)?;
    g.add(x, f)
}

/// Stack of encoder layers followed by a final layer norm.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
    pub final_ln: LayerNorm,
}

impl Encoder {
    pub fn new<R: Rng>(
        init: &mut Init<'_, R>,
        name: &str,
        d_model: usize,
        cfg: StackConfig,
    ) -> Result<Self> {
        let layers = (0..cfg.layers)
            .map(|i| EncoderLayer::new(init, &format!("{name}.layers.{i}"), d_model, cfg.d_ff, cfg.heads))
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            final_ln: LayerNorm::new(init, &format!("{name}.final_ln"), d_model),
        })
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var, key_padding: Option<&[bool]>) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(g, x, key_padding)?;
        }
        self.final_ln.forward(g, x)
    }
}

/// Pre-norm decoder layer: causal self-attention, cross-attention over
/// `memory`, then FFN.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub ln1: LayerNorm,
    pub self_attn: Attention,
    pub ln2: LayerNorm,
    pub cross_attn: Attention,
    pub ln3: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new<R: Rng>(
        init: &mut Init<'_, R>,
        name: &str,
        d_model: usize,
        d_ff: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(init, &format!("{name}.ln1"), d_model),
            self_attn: Attention::new(init, &format!("{name}.self_attn"), d_model, heads)?,
            ln2: LayerNorm::new(init, &format!("{name}.ln2"), d_model),
            cross_attn: Attention::new(init, &format!("{name}.cross_attn"), d_model, heads)?,
            ln3: LayerNorm::new(init, &format!("{name}.ln3"), d_model),
            ffn: FeedForward::new(init, &format!("{name}.ffn"), d_model, d_ff),
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        y: Var,
        memory: Var,
        memory_padding: Option<&[bool]>,
    ) -> Result<Var> {
        let h = self.ln1.forward(g, y)?;
        let a = self.self_attn.forward(
            g,
            h,
            h,
            AttnMask {
                key_padding: None,
                causal: true,
            },
        )?;
        let y = g.add(y, a)?;
        let h = self.ln2.forward(g, y)?;
        let c = self.cross_attn.forward(
            g,
            h,
            memory,
            AttnMask {
                key_padding: memory_padding,
                causal: false,
            },
        )?;
        let y = g.add(y, c)?;
        let h = self.ln3.forward(g, y)?;
        let f = self.ffn.forward(g, h)?;
        g.add(y, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalMode {
    Sinusoidal,
    Learned,
}

#[derive(Debug, Clone)]
pub enum PositionalEncoding {
    Sinusoidal { table: Tensor },
    /// Zero-initialized trainable table.
    Learned { table: ParamId, max_len: usize },
}

impl PositionalEncoding {
    pub fn new<R: Rng>(
        init: &mut Init<'_, R>,
        name: &str,
        mode: PositionalMode,
        max_len: usize,
        d_model: usize,
    ) -> Self {
        match mode {
            PositionalMode::Sinusoidal => Self::Sinusoidal {
                table: sinusoidal_table(max_len, d_model),
            },
            PositionalMode::Learned => Self::Learned {
                table: init.zeros(&format!("{name}.table"), &[max_len, d_model]),
                max_len,
            },
        }
    }

    pub fn max_len(&self) -> usize {
        match self {
            Self::Sinusoidal { table } => table.rows(),
            Self::Learned { max_len, .. } => *max_len,
        }
    }

    /// The first `len` rows of the encoding as a graph value.
    pub fn rows(&self, g: &mut Graph, len: usize) -> Result<Var> {
        if len > self.max_len() {
            return Err(Error::Capacity {
                len,
                max: self.max_len(),
            });
        }
        match self {
            Self::Sinusoidal { table } => {
                let d = table.cols();
                let t = Tensor::new(vec![len, d], table.data()[..len * d].to_vec())?;
                Ok(g.constant(t))
            }
            Self::Learned { table, max_len } => {
                let p = g.param(*table);
                if len == *max_len {
                    Ok(p)
                } else {
                    let idx: Vec<usize> = (0..len).collect();
                    g.gather_rows(p, &idx)
                }
            }
        }
    }

    pub fn add_to(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let len = g.shape(x)[0];
        let pe = self.rows(g, len)?;
        g.add(x, pe)
    }
}

/// `pe[p, 2i] = sin(p / 10000^(2i/d))`, `pe[p, 2i+1] = cos(p / 10000^(2i/d))`.
pub fn sinusoidal_table(max_len: usize, d_model: usize) -> Tensor {
    let mut data = vec![0.0; max_len * d_model];
    for p in 0..max_len {
        for j in 0..d_model {
            let i2 = (j / 2 * 2) as f64;
            let angle = p as f64 / 10000f64.powf(i2 / d_model as f64);
            data[p * d_model + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![max_len, d_model], data).expect("positive extents")
}
