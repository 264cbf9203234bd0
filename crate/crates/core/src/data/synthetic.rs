use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, EegSequence, EegTextPair, Vocabulary};
use crate::error::{Error, Result};

/// Text-evoked EEG stand-in. Every subject reads the same `n_sentences`
/// sentences, so the dataset holds `n_subjects × n_sentences` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_subjects: usize,
    pub n_sentences: usize,
    /// Total vocabulary including the five reserved ids.
    pub vocab_size: usize,
    /// Inclusive sentence-length range in words.
    pub len_range: (usize, usize),
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub target_nmr: f64,
    pub seed: u64,
    /// Standard deviation of the per-subject additive offset.
    #[serde(default = "default_subject_sigma")]
    pub subject_sigma: f64,
}

fn default_subject_sigma() -> f64 {
    0.5
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_subjects: 4,
            n_sentences: 16,
            vocab_size: 256,
            len_range: (4, 8),
            feature_dim: 32,
            noise_sigma: 0.1,
            target_nmr: 0.3251,
            seed: 7,
            subject_sigma: default_subject_sigma(),
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size < 10 {
            return fail(format!("vocab_size {} < 10", self.vocab_size));
        }
        if self.feature_dim < 8 {
            return fail(format!("feature_dim {} < 8", self.feature_dim));
        }
        if self.n_subjects == 0 || self.n_sentences == 0 {
            return fail("n_subjects and n_sentences must be positive".into());
        }
        let (lo, hi) = self.len_range;
        if lo == 0 || lo > hi {
            return fail(format!("bad len_range ({lo}, {hi})"));
        }
        if !(0.0..=1.0).contains(&self.target_nmr) {
            return fail(format!("target_nmr {} outside [0, 1]", self.target_nmr));
        }
        if self.noise_sigma < 0.0 || self.subject_sigma < 0.0 {
            return fail("noise scales must be non-negative".into());
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::from_tokens((5..self.vocab_size).map(token_name)).expect("distinct names")
    }
}

fn token_name(id: usize) -> String {
    format!("w{id:04}")
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

/// word feature = prototype(token) + offset(subject) + noise;
/// sentence feature = mean of every word prototype in the sentence + noise.
/// Each word feature is dropped independently with probability `target_nmr`.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<(Dataset, Vocabulary)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dim = cfg.feature_dim;
    let prototypes: Vec<Vec<f64>> = (0..cfg.vocab_size).map(|_| gaussian(&mut rng, dim, 1.0)).collect();
    let offsets: Vec<Vec<f64>> = (0..cfg.n_subjects)
        .map(|_| gaussian(&mut rng, dim, cfg.subject_sigma))
        .collect();
    let sentences: Vec<Vec<usize>> = (0..cfg.n_sentences)
        .map(|_| {
            let len = rng.random_range(cfg.len_range.0..=cfg.len_range.1);
            (0..len).map(|_| rng.random_range(5..cfg.vocab_size)).collect()
        })
        .collect();

    let mut pairs = Vec::with_capacity(cfg.n_subjects * cfg.n_sentences);
    for (s, offset) in offsets.iter().enumerate() {
        for (k, sent) in sentences.iter().enumerate() {
            let mut words = Vec::with_capacity(sent.len());
            for &tok in sent {
                let noise = gaussian(&mut rng, dim, cfg.noise_sigma);
                let dropped = rng.random_bool(cfg.target_nmr);
                let feat: Vec<f32> = (0..dim)
                    .map(|j| (prototypes[tok][j] + offset[j] + noise[j]) as f32)
                    .collect();
                words.push((!dropped).then_some(feat));
            }
            let noise = gaussian(&mut rng, dim, cfg.noise_sigma);
            let sentence_feature = (0..dim)
                .map(|j| {
                    let mean = sent.iter().map(|&t| prototypes[t][j]).sum::<f64>() / sent.len() as f64;
                    (mean + noise[j]) as f32
                })
                .collect();
            pairs.push(EegTextPair {
                eeg: EegSequence {
                    word_features: words,
                    sentence_feature,
                    subject_id: format!("S{:02}", s + 1),
                    sentence_id: format!("sent{k:04}"),
                },
                tokens: sent.iter().map(|&t| token_name(t)).collect(),
            });
        }
    }
    Ok((
        Dataset {
            feature_dim: dim,
            pairs,
        },
        cfg.vocabulary(),
    ))
}
