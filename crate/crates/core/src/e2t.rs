//! EEG-to-text decoding: pretrained EEG-side modules feeding a small
//! encoder-decoder language model.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cetmae::{CetMaeConfig, EegFrontEnd, MultiStream, PreparedSample, Stream};
use crate::checkpoint::{load_partial, Checkpoint, TransferReport};
use crate::data::{Vocabulary, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::nn::{
    DecoderLayer, Encoder, Graph, Init, LayerNorm, Linear, ParamId, ParamStore,
    PositionalEncoding, PositionalMode, StackConfig,
};
use crate::optim::{AdamW, AdamWConfig, LrSchedule};
use crate::seed::derive_seed;
use crate::tensor::{Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub layers_enc: usize,
    pub layers_dec: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
}

/// Which pretrained stream feeds the language model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    EegStream,
    JointStream,
    /// No pretrained weights; every module starts from its initializer.
    RandomInit,
}

impl TransferMode {
    fn stream(self) -> Stream {
        match self {
            TransferMode::JointStream => Stream::Joint,
            _ => Stream::Eeg,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    TeacherForced,
    Greedy,
}

/// Architecture of the assembled model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct E2tConfig {
    pub feature_dim: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub eeg_encoder: StackConfig,
    pub multistream: StackConfig,
    pub share_weights: bool,
    pub lm: LmConfig,
    pub transfer: TransferMode,
}

impl E2tConfig {
    pub fn from_cetmae(c: &CetMaeConfig, lm: LmConfig, transfer: TransferMode) -> Self {
        Self {
            feature_dim: c.feature_dim,
            d_model: c.d_model,
            vocab_size: c.vocab_size,
            max_len: c.max_len,
            eeg_encoder: c.eeg_encoder,
            multistream: c.multistream,
            share_weights: c.share_weights,
            lm,
            transfer,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lm.d_model != self.d_model {
            return Err(Error::Config(format!(
                "lm.d_model {} must equal the projection width {}",
                self.lm.d_model, self.d_model
            )));
        }
        if self.lm.heads == 0 || !self.lm.d_model.is_multiple_of(self.lm.heads) {
            return Err(Error::Config(format!(
                "lm: {} heads do not divide d_model {}",
                self.lm.heads, self.lm.d_model
            )));
        }
        if self.lm.layers_dec == 0 || self.lm.d_ff == 0 {
            return Err(Error::Config("lm needs a decoder layer and positive d_ff".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    pub sentence_id: String,
    pub subject_id: String,
    pub hypothesis: Vec<String>,
    pub reference: Vec<String>,
    pub mode: DecodeMode,
    pub collapsed: bool,
}

impl DecodeResult {
    /// The same result with consecutive repeats collapsed.
    pub fn collapse(&self) -> Self {
        Self {
            hypothesis: collapse_repeats(&self.hypothesis),
            collapsed: true,
            ..self.clone()
        }
    }
}

/// Reduces runs of identical consecutive tokens to one occurrence.
pub fn collapse_repeats<T: PartialEq + Clone>(tokens: &[T]) -> Vec<T> {
    let mut out: Vec<T> = Vec::with_capacity(tokens.len());
    for t in tokens {
        if out.last() != Some(t) {
            out.push(t.clone());
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct E2tModel {
    pub cfg: E2tConfig,
    pub params: ParamStore,
    pub front: EegFrontEnd,
    pub multistream: MultiStream,
    pub adapter: Linear,
    pub lm_pos: PositionalEncoding,
    pub lm_encoder: Encoder,
    pub embed: ParamId,
    pub decoder: Vec<DecoderLayer>,
    pub decoder_ln: LayerNorm,
    pub head: Linear,
}

/// Module names copied from a pretraining checkpoint.
pub const TRANSFER_FILTERS: [&str; 3] = ["eeg_encoder.*", "projection.*", "multistream.*"];

impl E2tModel {
    /// Builds the model and, unless `transfer` is random-init, copies the
    /// EEG encoder, projection and chosen multistream pass from `ckpt`.
    pub fn assemble(
        cfg: E2tConfig,
        ckpt: Option<&Checkpoint>,
        seed: u64,
    ) -> Result<(Self, Option<TransferReport>)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Self::build(cfg, ParamStore::new(), &mut rng)?;
        let report = match (model.cfg.transfer, ckpt) {
            (TransferMode::RandomInit, _) => None,
            (_, None) => {
                return Err(Error::Config(
                    "a pretraining checkpoint is required unless transfer is random_init".into(),
                ))
            }
            (_, Some(c)) => Some(load_partial(&mut model.params, c, &TRANSFER_FILTERS)?),
        };
        Ok((model, report))
    }

    /// Rebuilds a fine-tuned model from its own checkpoint.
    pub fn restore(ckpt: &Checkpoint) -> Result<Self> {
        let cfg: E2tConfig = ckpt.config()?;
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::build(cfg, ParamStore::new(), &mut rng)?;
        load_partial(&mut model.params, ckpt, &["*"])?;
        Ok(model)
    }

    fn build<R: Rng>(cfg: E2tConfig, mut store: ParamStore, rng: &mut R) -> Result<Self> {
        let mut init = Init { store: &mut store, rng };
        let front = EegFrontEnd::new(&mut init, cfg.feature_dim, cfg.d_model, cfg.max_len, cfg.eeg_encoder)?;
        let multistream = MultiStream::new(
            &mut init,
            cfg.d_model,
            cfg.multistream,
            cfg.share_weights,
            &[cfg.transfer.stream()],
        )?;
        let lm = cfg.lm;
        let adapter = Linear::new(&mut init, "adapter", cfg.d_model, lm.d_model);
        let lm_pos = PositionalEncoding::new(&mut init, "lm.pos", PositionalMode::Sinusoidal, cfg.max_len, lm.d_model);
        let lm_encoder = Encoder::new(
            &mut init,
            "lm.encoder",
            lm.d_model,
            StackConfig {
                layers: lm.layers_enc,
                d_ff: lm.d_ff,
                heads: lm.heads,
            },
        )?;
        let embed = init.normal("lm.embed", &[cfg.vocab_size, lm.d_model], 1.0);
        let decoder = (0..lm.layers_dec)
            .map(|i| DecoderLayer::new(&mut init, &format!("lm.decoder.layers.{i}"), lm.d_model, lm.d_ff, lm.heads))
            .collect::<Result<_>>()?;
        let decoder_ln = LayerNorm::new(&mut init, "lm.decoder.final_ln", lm.d_model);
        let head = Linear::new(&mut init, "lm.head", lm.d_model, cfg.vocab_size);
        Ok(Self {
            cfg,
            params: store,
            front,
            multistream,
            adapter,
            lm_pos,
            lm_encoder,
            embed,
            decoder,
            decoder_ln,
            head,
        })
    }

    /// Encoder memory for one EEG sequence, `(N+1) × lm.d_model`.
    pub fn memory(&self, g: &mut Graph, sample: &PreparedSample) -> Result<Var> {
        let natural = &sample.input.natural;
        if natural.len() > self.cfg.max_len {
            return Err(Error::Capacity {
                len: natural.len(),
                max: self.cfg.max_len,
            });
        }
        let x = g.constant(sample.input.features.clone());
        let emb = self.front.forward(g, x, natural)?;
        let s = self.multistream.forward(g, self.cfg.transfer.stream(), emb, Some(natural))?;
        let a = self.adapter.forward(g, s)?;
        let a = self.lm_pos.add_to(g, a)?;
        self.lm_encoder.forward(g, a, Some(natural))
    }

    /// Vocabulary logits for every position of `input` given the memory.
    pub fn decode_logits(
        &self,
        g: &mut Graph,
        memory: Var,
        natural: &[bool],
        input: &[usize],
    ) -> Result<Var> {
        if input.len() > self.cfg.max_len {
            return Err(Error::Capacity {
                len: input.len(),
                max: self.cfg.max_len,
            });
        }
        let table = g.param(self.embed);
        let y = g.gather_rows(table, input)?;
        let mut y = self.lm_pos.add_to(g, y)?;
        for layer in &self.decoder {
            y = layer.forward(g, y, memory, Some(natural))?;
        }
        let y = self.decoder_ln.forward(g, y)?;
        self.head.forward(g, y)
    }

    /// Teacher-forced cross-entropy: input `[BOS] + words`, target `words + [EOS]`.
    pub fn sample_loss(&self, g: &mut Graph, sample: &PreparedSample) -> Result<Var> {
        let memory = self.memory(g, sample)?;
        let t = sample.text_ids.len();
        let input = &sample.text_ids[..t - 1];
        let target = &sample.text_ids[1..];
        let logits = self.decode_logits(g, memory, &sample.input.natural, input)?;
        let flags: Vec<bool> = target.iter().map(|&id| id != PAD).collect();
        g.masked_cross_entropy(logits, target, &flags)
    }

    /// Mean of per-sample losses.
    pub fn batch_loss(&self, g: &mut Graph, batch: &[&PreparedSample]) -> Result<Var> {
        let losses = batch
            .iter()
            .map(|s| self.sample_loss(g, s))
            .collect::<Result<Vec<_>>>()?;
        crate::cetmae::mean_of(g, &losses)
    }

    /// Per-position argmax with the ground-truth prefix as decoder input;
    /// one prediction per reference word.
    pub fn decode_teacher_forced(&self, sample: &PreparedSample, vocab: &Vocabulary) -> Result<DecodeResult> {
        let mut g = Graph::new(&self.params);
        let memory = self.memory(&mut g, sample)?;
        let words = sample.word_ids().len();
        let input = &sample.text_ids[..words + 1];
        let logits = self.decode_logits(&mut g, memory, &sample.input.natural, input)?;
        let lv = g.value(logits);
        let ids: Vec<usize> = (0..words).map(|i| argmax_no_pad(lv.row(i))).collect();
        Ok(self.result(sample, vocab, &ids, DecodeMode::TeacherForced))
    }

    /// Autoregressive argmax from BOS until EOS or `max_len` tokens.
    pub fn decode_greedy(
        &self,
        sample: &PreparedSample,
        vocab: &Vocabulary,
        max_len: usize,
    ) -> Result<DecodeResult> {
        if max_len == 0 {
            return Err(Error::Config("greedy max_len must be at least 1".into()));
        }
        let max_len = max_len.min(self.cfg.max_len - 1);
        let mut g = Graph::new(&self.params);
        let memory = self.memory(&mut g, sample)?;
        let mut input = vec![BOS];
        let mut out = Vec::new();
        while out.len() < max_len {
            let logits = self.decode_logits(&mut g, memory, &sample.input.natural, &input)?;
            let next = argmax_no_pad(g.value(logits).row(input.len() - 1));
            if next == EOS {
                break;
            }
            out.push(next);
            input.push(next);
        }
        Ok(self.result(sample, vocab, &out, DecodeMode::Greedy))
    }

    pub fn decode(
        &self,
        sample: &PreparedSample,
        vocab: &Vocabulary,
        mode: DecodeMode,
        max_len: usize,
    ) -> Result<DecodeResult> {
        match mode {
            DecodeMode::TeacherForced => self.decode_teacher_forced(sample, vocab),
            DecodeMode::Greedy => self.decode_greedy(sample, vocab, max_len),
        }
    }

    fn result(&self, sample: &PreparedSample, vocab: &Vocabulary, ids: &[usize], mode: DecodeMode) -> DecodeResult {
        DecodeResult {
            sentence_id: sample.sentence_id.clone(),
            subject_id: sample.subject_id.clone(),
            hypothesis: vocab.decode(ids),
            reference: vocab.decode(sample.word_ids()),
            mode,
            collapsed: false,
        }
    }
}

fn argmax_no_pad(row: &[f64]) -> usize {
    let mut best = usize::MAX;
    for (i, &v) in row.iter().enumerate() {
        if i != PAD && (best == usize::MAX || v > row[best]) {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneOptions {
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub schedule: LrSchedule,
    pub seed: u64,
}

pub struct Finetuner {
    pub model: E2tModel,
    pub opts: FinetuneOptions,
    opt: AdamW,
}

impl Finetuner {
    pub fn new(model: E2tModel, opts: FinetuneOptions) -> Result<Self> {
        if opts.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let opt = AdamW::new(opts.optimizer, &model.params);
        Ok(Self { model, opts, opt })
    }

    /// One teacher-forced update of every parameter; returns the batch loss.
    pub fn step(&mut self, batch: &[&PreparedSample]) -> Result<f64> {
        let mut g = Graph::new(&self.model.params);
        let loss = self.model.batch_loss(&mut g, batch)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            let origin = g.first_nonfinite().unwrap_or("unknown").to_string();
            return Err(Error::NonFinite(format!("fine-tuning loss (first at {origin})")));
        }
        g.backward(loss)?;
        let grads: Vec<(ParamId, Tensor)> =
            g.param_grads().into_iter().map(|(id, t)| (id, t.clone())).collect();
        drop(g);
        self.opt.step(&mut self.model.params, &grads);
        Ok(value)
    }

    /// One shuffled pass; returns the sample-weighted mean loss.
    pub fn run_epoch(&mut self, samples: &[PreparedSample], epoch: usize) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::EmptyInput("fine-tuning set"));
        }
        self.opt.cfg.lr = self.opts.schedule.lr_at(self.opts.optimizer.lr, epoch);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.opts.seed, epoch as u64)));
        let mut sum = 0.0;
        for (b, chunk) in order.chunks(self.opts.batch_size).enumerate() {
            let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let loss = self.step(&batch).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("{m} in epoch {epoch}, batch {b}")),
                other => other,
            })?;
            sum += loss * batch.len() as f64;
        }
        Ok(sum / samples.len() as f64)
    }

    pub fn into_model(self) -> E2tModel {
        self.model
    }
}
