use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::mask_text;
use crate::nn::{
    Encoder, Graph, Init, Linear, ParamId, ParamStore, PositionalEncoding, PositionalMode,
    StackConfig,
};
use crate::optim::{AdamW, AdamWConfig};
use crate::seed::derive_seed;
use crate::tensor::{Tensor, Var};

/// Token embedding, sinusoidal positions and a transformer stack; names
/// under `text_encoder.*`.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub embed: ParamId,
    pub pos: PositionalEncoding,
    pub encoder: Encoder,
}

impl TextEncoder {
    pub fn new<R: Rng>(
        init: &mut Init<'_, R>,
        vocab_size: usize,
        d_model: usize,
        max_len: usize,
        stack: StackConfig,
    ) -> Result<Self> {
        Ok(Self {
            embed: init.normal("text_encoder.embed", &[vocab_size, d_model], 1.0),
            pos: PositionalEncoding::new(init, "text_encoder.pos", PositionalMode::Sinusoidal, max_len, d_model),
            encoder: Encoder::new(init, "text_encoder", d_model, stack)?,
        })
    }

    /// Last hidden states, `T × d_model`.
    pub fn forward(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        let table = g.param(self.embed);
        let emb = g.gather_rows(table, ids)?;
        let x = self.pos.add_to(g, emb)?;
        self.encoder.forward(g, x, None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextPretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub mask_ratio: f64,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for TextPretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            mask_ratio: 0.15,
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextPretrainLog {
    pub epoch: usize,
    pub mlm_loss: f64,
}

/// Trains a text encoder with a masked-token objective over `sequences` and
/// returns a store holding `text_encoder.*` plus the discarded MLM head.
pub fn pretrain_text_encoder(
    sequences: &[Vec<usize>],
    vocab_size: usize,
    d_model: usize,
    max_len: usize,
    stack: StackConfig,
    cfg: &TextPretrainConfig,
) -> Result<(ParamStore, Vec<TextPretrainLog>)> {
    if sequences.is_empty() {
        return Err(Error::EmptyInput("text pretraining corpus"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut init = Init { store: &mut store, rng: &mut rng };
    let enc = TextEncoder::new(&mut init, vocab_size, d_model, max_len, stack)?;
    let head = Linear::new(&mut init, "text_mlm_head", d_model, vocab_size);
    let mut opt = AdamW::new(cfg.optimizer, &store);
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let epoch_seed = derive_seed(cfg.seed, epoch as u64 + 1);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = Graph::new(&store);
            let mut losses = Vec::new();
            for &i in chunk {
                let ids = &sequences[i];
                let Ok(flags) = mask_text(ids, cfg.mask_ratio, derive_seed(epoch_seed, i as u64))
                else {
                    continue;
                };
                let input: Vec<usize> = ids
                    .iter()
                    .zip(&flags)
                    .map(|(&t, &m)| if m { crate::data::MASK } else { t })
                    .collect();
                let h = enc.forward(&mut g, &input)?;
                let logits = head.forward(&mut g, h)?;
                losses.push(g.masked_cross_entropy(logits, ids, &flags)?);
            }
            if losses.is_empty() {
                continue;
            }
            let loss = super::model::mean_of(&mut g, &losses)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("text MLM loss in epoch {epoch}")));
            }
            g.backward(loss)?;
            let grads: Vec<(ParamId, Tensor)> =
                g.param_grads().into_iter().map(|(id, t)| (id, t.clone())).collect();
            drop(g);
            opt.step(&mut store, &grads);
            sum += value * losses.len() as f64;
            count += losses.len();
        }
        logs.push(TextPretrainLog {
            epoch,
            mlm_loss: if count == 0 { 0.0 } else { sum / count as f64 },
        });
    }
    Ok((store, logs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlm_loss_decreases() {
        let seqs: Vec<Vec<usize>> = (0..8)
            .map(|s| {
                let mut v = vec![crate::data::BOS];
                v.extend((0..5).map(|j| 5 + (s * 5 + j) % 20));
                v.push(crate::data::EOS);
                v
            })
            .collect();
        let stack = StackConfig { layers: 1, d_ff: 32, heads: 2 };
        let cfg = TextPretrainConfig {
            epochs: 15,
            mask_ratio: 0.3,
            ..TextPretrainConfig::default()
        };
        let (store, logs) = pretrain_text_encoder(&seqs, 25, 16, 16, stack, &cfg).unwrap();
        assert!(logs.last().unwrap().mlm_loss < logs[0].mlm_loss);
        assert!(store.by_name("text_encoder.embed").is_some());
        assert!(store.by_name("text_mlm_head.weight").is_some());
    }
}
