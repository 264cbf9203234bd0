use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::modules::{EegFrontEnd, MultiStream, Stream};
use super::text::TextEncoder;
use super::{CetMaeConfig, LossBreakdown, Objective, PreparedSample, StreamMode};
use crate::checkpoint::{load_partial, Checkpoint, TransferReport};
use crate::data::MASK;
use crate::error::{Error, Result};
use crate::masking::MaskPlan;
use crate::nn::{
    sinusoidal_table, Encoder, Graph, Init, Linear, ParamId, ParamStore, PositionalEncoding,
    PositionalMode,
};
use crate::tensor::{Tape, Tensor, Var};

/// Arithmetic mean of scalar graph values.
pub(crate) fn mean_of(g: &mut Tape, vars: &[Var]) -> Result<Var> {
    let (first, rest) = vars
        .split_first()
        .ok_or(Error::EmptyInput("mean of no terms"))?;
    let mut acc = *first;
    for &v in rest {
        acc = g.add(acc, v)?;
    }
    Ok(g.scale(acc, 1.0 / vars.len() as f64))
}

/// Symmetric InfoNCE over `B × d` pooled embeddings: rows are L2-normalized,
/// `s = E·Tᵀ / τ`, and the loss averages row-wise and column-wise
/// cross-entropy against the diagonal.
pub fn contrastive_loss(g: &mut Tape, eeg: Var, text: Var, tau: f64) -> Result<Var> {
    if g.shape(eeg) != g.shape(text) {
        return Err(Error::Dimension {
            op: "contrastive_loss",
            lhs: g.shape(eeg).to_vec(),
            rhs: g.shape(text).to_vec(),
        });
    }
    let b = g.value(eeg).rows();
    let e = g.l2_normalize_rows(eeg);
    let t = g.l2_normalize_rows(text);
    let s = g.matmul_nt(e, t)?;
    let s = g.scale(s, 1.0 / tau);
    let targets: Vec<usize> = (0..b).collect();
    let all = vec![true; b];
    let rows = g.masked_cross_entropy(s, &targets, &all)?;
    let st = g.transpose(s)?;
    let cols = g.masked_cross_entropy(st, &targets, &all)?;
    let sum = g.add(rows, cols)?;
    Ok(g.scale(sum, 0.5))
}

#[derive(Debug, Clone, Copy)]
pub struct StreamVars {
    pub eeg: Option<Var>,
    pub text: Option<Var>,
    pub joint: Option<Var>,
}

/// Graph values produced for one sample.
#[derive(Debug, Clone)]
pub struct SampleForward {
    pub streams: StreamVars,
    pub eeg_pred: Option<Var>,
    pub text_logits: Option<Var>,
    pub l_text: Option<Var>,
    pub l_eeg: Option<Var>,
    pub eeg_pooled: Option<Var>,
    pub text_pooled: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct BatchForward {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub masked_correct: usize,
    pub masked_total: usize,
}

#[derive(Debug, Clone)]
pub struct CetMae {
    pub cfg: CetMaeConfig,
    pub params: ParamStore,
    pub text_encoder: TextEncoder,
    pub front: EegFrontEnd,
    pub multistream: MultiStream,
    pub text_mask: ParamId,
    pub eeg_mask: ParamId,
    pub eeg_decoder_input: Linear,
    pub eeg_mask_token: ParamId,
    pub eeg_decoder_pos: PositionalEncoding,
    pub eeg_decoder: Encoder,
    pub eeg_head: Linear,
    pub text_decoder: Linear,
    positions: Tensor,
    text_ready: bool,
}

impl CetMae {
    /// Randomly initialized model. The text encoder must be installed with
    /// [`CetMae::install_text_encoder`] before any forward pass.
    pub fn new(cfg: CetMaeConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(cfg, ParamStore::new(), &mut rng)
    }

    /// Names and shapes only; nothing is allocated.
    pub fn shape_only(cfg: CetMaeConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Self::build(cfg, ParamStore::shape_only(), &mut rng)
    }

    fn build<R: Rng>(cfg: CetMaeConfig, mut store: ParamStore, rng: &mut R) -> Result<Self> {
        let mut init = Init { store: &mut store, rng };
        let text_encoder = TextEncoder::new(
            &mut init,
            cfg.vocab_size,
            cfg.d_model,
            cfg.max_len,
            cfg.text_encoder.stack(),
        )?;
        let front = EegFrontEnd::new(&mut init, cfg.feature_dim, cfg.d_model, cfg.max_len, cfg.eeg_encoder)?;
        let multistream = MultiStream::new(&mut init, cfg.d_model, cfg.multistream, cfg.share_weights, &Stream::ALL)?;
        let text_mask = init.normal("mask.text", &[cfg.d_model], 0.02);
        let eeg_mask = init.normal("mask.eeg", &[cfg.d_model], 0.02);
        let eeg_decoder_input = Linear::new(&mut init, "eeg_decoder.input", cfg.d_model, cfg.feature_dim);
        let eeg_mask_token = init.normal("eeg_decoder.mask_token", &[cfg.feature_dim], 0.02);
        let eeg_decoder_pos = PositionalEncoding::new(
            &mut init,
            "eeg_decoder.pos",
            PositionalMode::Sinusoidal,
            cfg.max_len,
            cfg.feature_dim,
        );
        let eeg_decoder = Encoder::new(&mut init, "eeg_decoder", cfg.feature_dim, cfg.eeg_decoder)?;
        let eeg_head = Linear::new(&mut init, "eeg_decoder.head", cfg.feature_dim, cfg.feature_dim);
        let text_decoder = Linear::new(&mut init, "text_decoder", cfg.d_model, cfg.vocab_size);
        if cfg.text_encoder.frozen {
            store.freeze_prefix("text_encoder.");
        }
        let positions = if store.is_shape_only() {
            Tensor::scalar(0.0)
        } else {
            sinusoidal_table(cfg.max_len, cfg.d_model)
        };
        Ok(Self {
            cfg,
            params: store,
            text_encoder,
            front,
            multistream,
            text_mask,
            eeg_mask,
            eeg_decoder_input,
            eeg_mask_token,
            eeg_decoder_pos,
            eeg_decoder,
            eeg_head,
            text_decoder,
            positions,
            text_ready: false,
        })
    }

    /// Loads `text_encoder.*` from `source` and re-applies the freeze flag.
    pub fn install_text_encoder(&mut self, source: &Checkpoint) -> Result<TransferReport> {
        let report = load_partial(&mut self.params, source, &["text_encoder.*"])?;
        if self.cfg.text_encoder.frozen {
            self.params.freeze_prefix("text_encoder.");
        }
        self.text_ready = true;
        Ok(report)
    }

    /// Restores every parameter from a checkpoint of this architecture.
    pub fn load_all(&mut self, source: &Checkpoint) -> Result<TransferReport> {
        let report = load_partial(&mut self.params, source, &["*"])?;
        if self.cfg.text_encoder.frozen {
            self.params.freeze_prefix("text_encoder.");
        }
        self.text_ready = true;
        Ok(report)
    }

    pub fn text_encoder_ready(&self) -> bool {
        self.text_ready
    }

    pub fn encode_text(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        if !self.text_ready {
            return Err(Error::Config(
                "text encoder weights not loaded; a pretrained text-encoder checkpoint is required"
                    .into(),
            ));
        }
        if ids.len() > self.cfg.max_len {
            return Err(Error::Capacity {
                len: ids.len(),
                max: self.cfg.max_len,
            });
        }
        self.text_encoder.forward(g, ids)
    }

    /// Text embeddings outside any training graph.
    pub fn encode_text_frozen(&self, ids: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new(&self.params);
        let v = self.encode_text(&mut g, ids)?;
        Ok(g.value(v).clone())
    }

    /// EEG encoder and projection over the full input (natural masks only).
    pub fn encode_eeg(&self, g: &mut Graph, features: &Tensor, natural: &[bool]) -> Result<Var> {
        let x = g.constant(features.clone());
        self.front.forward(g, x, natural)
    }

    /// Training masks for one sample. The contrastive-only variant masks nothing.
    pub fn draw_plan(&self, sample: &PreparedSample, seed: u64) -> Result<MaskPlan> {
        let c = &self.cfg;
        if c.objective == Objective::Cet {
            return Ok(MaskPlan {
                text_masked: vec![false; sample.text_ids.len()],
                eeg_masked: vec![false; sample.input.len()],
                eeg_natural: sample.input.natural.clone(),
                text_ratio: 0.0,
                eeg_ratio: 0.0,
                strategy: c.mask_strategy,
                seed,
            });
        }
        MaskPlan::draw(
            &sample.text_ids,
            &sample.input.natural,
            c.text_mask_ratio,
            c.eeg_mask_ratio,
            c.mask_strategy,
            seed,
        )
    }

    fn wants_streams(&self) -> bool {
        self.cfg.stream_mode == StreamMode::Multi && self.cfg.objective != Objective::EtMae
    }

    fn wants_reconstruction(&self) -> bool {
        self.cfg.objective != Objective::Cet
    }

    pub fn forward_sample(
        &self,
        g: &mut Graph,
        sample: &PreparedSample,
        plan: &MaskPlan,
    ) -> Result<SampleForward> {
        let n1 = sample.input.len();
        let t = sample.text_ids.len();
        if plan.eeg_masked.len() != n1 || plan.text_masked.len() != t {
            return Err(Error::Contract("mask plan does not match sample lengths".into()));
        }
        for len in [n1, t] {
            if len > self.cfg.max_len {
                return Err(Error::Capacity {
                    len,
                    max: self.cfg.max_len,
                });
            }
        }
        let natural = &sample.input.natural;
        let hidden: Vec<bool> = natural
            .iter()
            .zip(&plan.eeg_masked)
            .map(|(&a, &b)| a || b)
            .collect();

        // EEG side: masked rows are zeroed and hidden from attention so the
        // encoder cannot copy them into neighbouring positions.
        let mut visible = sample.input.features.clone();
        let f = visible.cols();
        for (row, &h) in visible.data_mut().chunks_mut(f).zip(&hidden) {
            if h {
                row.fill(0.0);
            }
        }
        let x = g.constant(visible);
        // With every position hidden there is no key left to attend to; the
        // zeroed rows themselves then serve as keys.
        let keys = if hidden.iter().all(|&h| h) { natural } else { &hidden };
        let emb = self.front.forward(g, x, keys)?;

        let text_in: Vec<usize> = sample
            .text_ids
            .iter()
            .zip(&plan.text_masked)
            .map(|(&id, &m)| if m { MASK } else { id })
            .collect();
        let text_h = self.encode_text(g, &text_in)?;

        let mut streams = StreamVars {
            eeg: None,
            text: None,
            joint: None,
        };
        let mut out = SampleForward {
            streams,
            eeg_pred: None,
            text_logits: None,
            l_text: None,
            l_eeg: None,
            eeg_pooled: None,
            text_pooled: None,
        };

        if self.wants_streams() {
            let e = self.multistream.forward(g, Stream::Eeg, emb, Some(natural))?;
            let keep: Vec<usize> = (0..t).filter(|&i| !plan.text_masked[i]).collect();
            let vis = g.gather_rows(text_h, &keep)?;
            let s = self.multistream.forward(g, Stream::Text, vis, None)?;
            let weights: Vec<f64> = natural.iter().map(|&m| if m { 0.0 } else { 1.0 }).collect();
            out.eeg_pooled = Some(g.weighted_mean_rows(e, &weights)?);
            out.text_pooled = Some(g.weighted_mean_rows(s, &vec![1.0; keep.len()])?);
            streams.eeg = Some(e);
            streams.text = Some(s);
        }

        if self.wants_reconstruction() {
            let pos = g.constant(self.positions.clone());
            let mask_e = g.param(self.eeg_mask);
            let eeg_j = g.replace_rows(emb, &plan.eeg_masked, mask_e)?;
            let eeg_j = g.add_to_rows(eeg_j, &plan.eeg_masked, pos)?;
            let mask_t = g.param(self.text_mask);
            let text_j = g.replace_rows(text_h, &plan.text_masked, mask_t)?;
            let text_j = g.add_to_rows(text_j, &plan.text_masked, pos)?;
            let joint_in = g.concat_rows(&[eeg_j, text_j])?;
            let mut pad = natural.clone();
            pad.extend(std::iter::repeat_n(false, t));
            let joint = self.multistream.forward(g, Stream::Joint, joint_in, Some(&pad))?;
            streams.joint = Some(joint);

            let idx_e: Vec<usize> = (0..n1).collect();
            let idx_t: Vec<usize> = (n1..n1 + t).collect();
            let joint_e = g.gather_rows(joint, &idx_e)?;
            let joint_t = g.gather_rows(joint, &idx_t)?;

            let logits = self.text_decoder.forward(g, joint_t)?;
            out.l_text = Some(g.masked_cross_entropy(logits, &sample.text_ids, &plan.text_masked)?);
            out.text_logits = Some(logits);

            let d = self.eeg_decoder_input.forward(g, joint_e)?;
            let tok = g.param(self.eeg_mask_token);
            let d = g.replace_rows(d, &plan.eeg_masked, tok)?;
            let d = self.eeg_decoder_pos.add_to(g, d)?;
            let d = self.eeg_decoder.forward(g, d, Some(natural))?;
            let pred = self.eeg_head.forward(g, d)?;
            let target = g.constant(sample.input.features.clone());
            let flags: Vec<bool> = if self.cfg.loss_on_all_positions {
                natural.iter().map(|&m| !m).collect()
            } else {
                plan.eeg_masked.clone()
            };
            out.l_eeg = Some(g.masked_mse(pred, target, &flags)?);
            out.eeg_pred = Some(pred);
        }
        out.streams = streams;
        Ok(out)
    }

    /// Weighted pretraining loss over a batch with precomputed masks.
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        samples: &[&PreparedSample],
        plans: &[MaskPlan],
    ) -> Result<BatchForward> {
        if samples.is_empty() || samples.len() != plans.len() {
            return Err(Error::Contract("batch needs one mask plan per sample".into()));
        }
        let (mut lt, mut le, mut pe, mut pt) = (vec![], vec![], vec![], vec![]);
        let (mut correct, mut total) = (0, 0);
        for (s, p) in samples.iter().zip(plans) {
            let f = self.forward_sample(g, s, p)?;
            lt.extend(f.l_text);
            le.extend(f.l_eeg);
            pe.extend(f.eeg_pooled);
            pt.extend(f.text_pooled);
            if let Some(logits) = f.text_logits {
                let lv = g.value(logits);
                for (i, &m) in p.text_masked.iter().enumerate() {
                    if m {
                        total += 1;
                        correct += usize::from(argmax(lv.row(i)) == s.text_ids[i]);
                    }
                }
            }
        }
        let l_text = if lt.is_empty() { None } else { Some(mean_of(g, &lt)?) };
        let l_eeg = if le.is_empty() { None } else { Some(mean_of(g, &le)?) };
        let l_cl = if pe.is_empty() {
            None
        } else {
            let e = g.concat_rows(&pe)?;
            let t = g.concat_rows(&pt)?;
            Some(contrastive_loss(g, e, t, self.cfg.temperature)?)
        };
        let val = |g: &Graph, v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
        for (name, v) in [("l_text", l_text), ("l_eeg", l_eeg), ("l_contrastive", l_cl)] {
            if !val(g, v).is_finite() {
                let origin = g.first_nonfinite().unwrap_or("unknown").to_string();
                return Err(Error::NonFinite(format!("{name} (first at {origin})")));
            }
        }
        let lambda = self.cfg.lambda;
        let breakdown = LossBreakdown::combine(lambda, val(g, l_text), val(g, l_eeg), val(g, l_cl));
        let mut terms = Vec::new();
        for (v, w) in [(l_text, lambda.text), (l_eeg, lambda.eeg), (l_cl, lambda.contrastive)] {
            if let Some(v) = v {
                terms.push(g.scale(v, w));
            }
        }
        let mut total_var = terms[0];
        for &t in &terms[1..] {
            total_var = g.add(total_var, t)?;
        }
        Ok(BatchForward {
            total: total_var,
            breakdown,
            masked_correct: correct,
            masked_total: total,
        })
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
