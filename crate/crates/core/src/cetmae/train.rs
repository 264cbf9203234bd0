use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CetMae, LossBreakdown, PreparedSample};
use crate::error::{Error, Result};
use crate::masking::MaskPlan;
use crate::nn::{Graph, ParamId};
use crate::optim::{AdamW, AdamWConfig, LrSchedule};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

const SHUFFLE_STREAM: u64 = 0x5348;
const MASK_STREAM: u64 = 0x4d41;
const PROBE_STREAM: u64 = 0x5052;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub schedule: LrSchedule,
    /// Draw fresh masks every epoch; otherwise each sample keeps its first draw.
    pub remask_each_epoch: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub breakdown: LossBreakdown,
    pub masked_correct: usize,
    pub masked_total: usize,
}

/// One line of the pretraining log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_text: f64,
    pub l_eeg: f64,
    pub l_cl: f64,
    pub total: f64,
    pub masked_text_acc: f64,
    pub skipped: usize,
}

pub struct Pretrainer {
    pub model: CetMae,
    pub opts: PretrainOptions,
    opt: AdamW,
}

impl Pretrainer {
    pub fn new(model: CetMae, opts: PretrainOptions) -> Result<Self> {
        if opts.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !model.text_encoder_ready() {
            return Err(Error::Config("text encoder weights not loaded".into()));
        }
        let opt = AdamW::new(opts.optimizer, &model.params);
        Ok(Self { model, opts, opt })
    }

    /// Forward, backward and one AdamW update of every trainable parameter.
    pub fn step(&mut self, batch: &[&PreparedSample], plans: &[MaskPlan]) -> Result<StepOutcome> {
        let mut g = Graph::new(&self.model.params);
        let out = self.model.batch_loss(&mut g, batch, plans)?;
        g.backward(out.total)?;
        let grads: Vec<(ParamId, Tensor)> =
            g.param_grads().into_iter().map(|(id, t)| (id, t.clone())).collect();
        drop(g);
        self.opt.step(&mut self.model.params, &grads);
        Ok(StepOutcome {
            breakdown: out.breakdown,
            masked_correct: out.masked_correct,
            masked_total: out.masked_total,
        })
    }

    fn mask_seed(&self, epoch: usize, sample: usize) -> u64 {
        let round = if self.opts.remask_each_epoch { epoch as u64 } else { 0 };
        derive_seed(derive_seed(derive_seed(self.opts.seed, MASK_STREAM), round), sample as u64)
    }

    /// One pass over `samples` in a seeded shuffled order. Samples that admit
    /// no valid mask (no present word, no content token) are skipped.
    pub fn run_epoch(&mut self, samples: &[PreparedSample], epoch: usize) -> Result<EpochLog> {
        self.opt.cfg.lr = self.opts.schedule.lr_at(self.opts.optimizer.lr, epoch);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let shuffle = derive_seed(derive_seed(self.opts.seed, SHUFFLE_STREAM), epoch as u64);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle));
        let mut sums = [0.0f64; 4];
        let (mut used, mut skipped, mut correct, mut total) = (0usize, 0usize, 0usize, 0usize);
        for (b, chunk) in order.chunks(self.opts.batch_size).enumerate() {
            let mut batch = Vec::with_capacity(chunk.len());
            let mut plans = Vec::with_capacity(chunk.len());
            for &i in chunk {
                match self.model.draw_plan(&samples[i], self.mask_seed(epoch, i)) {
                    Ok(p) => {
                        batch.push(&samples[i]);
                        plans.push(p);
                    }
                    Err(Error::Degenerate(why)) => {
                        tracing::debug!(sample = %samples[i].sentence_id, %why, "skipping sample");
                        skipped += 1;
                    }
                    Err(e) => return Err(e),
                }
            }
            if batch.is_empty() {
                continue;
            }
            let out = self.step(&batch, &plans).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("{m} in epoch {epoch}, batch {b}")),
                other => other,
            })?;
            let w = batch.len() as f64;
            let bd = out.breakdown;
            for (s, v) in sums.iter_mut().zip([bd.l_text, bd.l_eeg, bd.l_contrastive, bd.total]) {
                *s += w * v;
            }
            used += batch.len();
            correct += out.masked_correct;
            total += out.masked_total;
        }
        if used == 0 {
            return Err(Error::Degenerate(format!("epoch {epoch}: every sample was skipped")));
        }
        let n = used as f64;
        Ok(EpochLog {
            epoch,
            l_text: sums[0] / n,
            l_eeg: sums[1] / n,
            l_cl: sums[2] / n,
            total: sums[3] / n,
            masked_text_acc: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            skipped,
        })
    }

    /// Forward-only loss over `samples` under one fixed mask draw per sample
    /// and fixed batching, so successive calls differ only through the
    /// parameters. Returns the sample-weighted breakdown and masked-text accuracy.
    pub fn evaluate(&self, samples: &[PreparedSample]) -> Result<(LossBreakdown, f64)> {
        let probe = derive_seed(self.opts.seed, PROBE_STREAM);
        let mut sums = [0.0f64; 4];
        let (mut used, mut correct, mut total) = (0usize, 0usize, 0usize);
        let indexed: Vec<usize> = (0..samples.len()).collect();
        for chunk in indexed.chunks(self.opts.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len());
            let mut plans = Vec::with_capacity(chunk.len());
            for &i in chunk {
                match self.model.draw_plan(&samples[i], derive_seed(probe, i as u64)) {
                    Ok(p) => {
                        batch.push(&samples[i]);
                        plans.push(p);
                    }
                    Err(Error::Degenerate(_)) => {}
                    Err(e) => return Err(e),
                }
            }
            if batch.is_empty() {
                continue;
            }
            let mut g = Graph::new(&self.model.params);
            let out = self.model.batch_loss(&mut g, &batch, &plans)?;
            let w = batch.len() as f64;
            let bd = out.breakdown;
            for (s, v) in sums.iter_mut().zip([bd.l_text, bd.l_eeg, bd.l_contrastive, bd.total]) {
                *s += w * v;
            }
            used += batch.len();
            correct += out.masked_correct;
            total += out.masked_total;
        }
        if used == 0 {
            return Err(Error::Degenerate("no sample admits a mask".into()));
        }
        let n = used as f64;
        let acc = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
        Ok((
            LossBreakdown {
                l_text: sums[0] / n,
                l_eeg: sums[1] / n,
                l_contrastive: sums[2] / n,
                total: sums[3] / n,
            },
            acc,
        ))
    }

    pub fn into_model(self) -> CetMae {
        self.model
    }
}
