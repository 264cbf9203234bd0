//! Contrastive EEG-text masked autoencoder: configuration, model, losses and
//! the pretraining loop.

mod model;
mod modules;
mod text;
mod train;

pub(crate) use model::mean_of;
pub use model::{contrastive_loss, BatchForward, CetMae, SampleForward, StreamVars};
pub use modules::{EegFrontEnd, MultiStream, Stream};
pub use text::{pretrain_text_encoder, TextEncoder, TextPretrainConfig, TextPretrainLog};
pub use train::{EpochLog, PretrainOptions, Pretrainer, StepOutcome};

use serde::{Deserialize, Serialize};

use crate::data::{build_input_sequence, EegTextPair, InputSequence, Vocabulary, BOS, EOS};
use crate::error::{Error, Result};
use crate::masking::EegMaskStrategy;
use crate::nn::StackConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Paper,
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected paper or desk)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamMode {
    Multi,
    /// Only the concatenated stream runs; the contrastive term is zero.
    JointOnly,
}

/// Which objectives contribute to the total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Full,
    /// Contrastive only: no training masks, reconstruction terms are zero.
    Cet,
    /// Reconstruction only: the contrastive term is zero.
    EtMae,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub layers: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub frozen: bool,
}

impl TextEncoderConfig {
    pub fn stack(&self) -> StackConfig {
        StackConfig {
            layers: self.layers,
            d_ff: self.d_ff,
            heads: self.heads,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub text: f64,
    pub eeg: f64,
    pub contrastive: f64,
}

impl LossWeights {
    pub const STANDARD: LossWeights = LossWeights {
        text: 0.1,
        eeg: 1.0,
        contrastive: 0.01,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CetMaeConfig {
    pub feature_dim: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    /// Longest token sequence including the two boundary tokens.
    pub max_len: usize,
    pub eeg_encoder: StackConfig,
    pub multistream: StackConfig,
    pub share_weights: bool,
    /// The EEG decoder runs at `feature_dim` width.
    pub eeg_decoder: StackConfig,
    pub text_encoder: TextEncoderConfig,
    pub text_mask_ratio: f64,
    pub eeg_mask_ratio: f64,
    pub mask_strategy: EegMaskStrategy,
    pub lambda: LossWeights,
    pub temperature: f64,
    pub stream_mode: StreamMode,
    pub objective: Objective,
    /// Reconstruction error over every present EEG position instead of only
    /// the training-masked ones.
    pub loss_on_all_positions: bool,
}

impl CetMaeConfig {
    pub fn preset(preset: Preset, vocab_size: usize, feature_dim: usize) -> Self {
        match preset {
            Preset::Paper => Self::paper(vocab_size, feature_dim),
            Preset::Desk => Self::desk(vocab_size, feature_dim),
        }
    }

    pub fn paper(vocab_size: usize, feature_dim: usize) -> Self {
        Self {
            feature_dim,
            d_model: 1024,
            vocab_size,
            max_len: 128,
            eeg_encoder: StackConfig {
                layers: 6,
                d_ff: 2048,
                heads: 8,
            },
            multistream: StackConfig {
                layers: 1,
                d_ff: 4096,
                heads: 16,
            },
            share_weights: true,
            eeg_decoder: StackConfig {
                layers: 1,
                d_ff: 2048,
                heads: 8,
            },
            text_encoder: TextEncoderConfig {
                layers: 12,
                d_ff: 4096,
                heads: 16,
                frozen: true,
            },
            text_mask_ratio: 0.75,
            eeg_mask_ratio: 0.75,
            mask_strategy: EegMaskStrategy::ForcedSentence,
            lambda: LossWeights::STANDARD,
            temperature: 0.07,
            stream_mode: StreamMode::Multi,
            objective: Objective::Full,
            loss_on_all_positions: false,
        }
    }

    pub fn desk(vocab_size: usize, feature_dim: usize) -> Self {
        Self {
            feature_dim,
            d_model: 64,
            vocab_size,
            max_len: 64,
            eeg_encoder: StackConfig {
                layers: 2,
                d_ff: 64,
                heads: 4,
            },
            multistream: StackConfig {
                layers: 1,
                d_ff: 256,
                heads: 4,
            },
            share_weights: true,
            eeg_decoder: StackConfig {
                layers: 1,
                d_ff: 64,
                heads: 4,
            },
            text_encoder: TextEncoderConfig {
                layers: 1,
                d_ff: 128,
                heads: 4,
                frozen: true,
            },
            ..Self::paper(vocab_size, feature_dim)
        }
    }

    // Negated comparisons below also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.feature_dim == 0 || self.d_model == 0 {
            return bad("feature_dim and d_model must be positive".into());
        }
        if self.vocab_size < 6 {
            return bad(format!("vocab_size {} leaves no content tokens", self.vocab_size));
        }
        if self.max_len < 3 {
            return bad(format!("max_len {} is too short", self.max_len));
        }
        let stacks = [
            ("eeg_encoder", self.eeg_encoder, self.feature_dim),
            ("multistream", self.multistream, self.d_model),
            ("eeg_decoder", self.eeg_decoder, self.feature_dim),
            ("text_encoder", self.text_encoder.stack(), self.d_model),
        ];
        for (name, s, width) in stacks {
            if s.heads == 0 || width % s.heads != 0 {
                return bad(format!("{name}: {} heads do not divide width {width}", s.heads));
            }
            if s.d_ff == 0 {
                return bad(format!("{name}: d_ff must be positive"));
            }
        }
        if self.multistream.layers == 0 || self.eeg_decoder.layers == 0 {
            return bad("multistream and eeg_decoder need at least one layer".into());
        }
        for (name, r) in [("text", self.text_mask_ratio), ("eeg", self.eeg_mask_ratio)] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{name} mask ratio {r} outside [0, 1]"));
            }
        }
        let l = self.lambda;
        if !(l.text >= 0.0 && l.eeg >= 0.0 && l.contrastive >= 0.0) {
            return bad(format!("loss weights must be non-negative, got {l:?}"));
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        Ok(())
    }
}

/// The three pretraining terms and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_text: f64,
    pub l_eeg: f64,
    pub l_contrastive: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `λ_T·l_text + λ_E·l_eeg + λ_CL·l_contrastive`, evaluated left to right,
    /// the same order the training graph uses.
    pub fn combine(lambda: LossWeights, l_text: f64, l_eeg: f64, l_contrastive: f64) -> Self {
        Self {
            l_text,
            l_eeg,
            l_contrastive,
            total: lambda.text * l_text + lambda.eeg * l_eeg + lambda.contrastive * l_contrastive,
        }
    }
}

/// A pair ready for the model: feature rows, natural-missing flags and the
/// token ids `[BOS, w1..wN, EOS]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub input: InputSequence,
    pub text_ids: Vec<usize>,
    pub subject_id: String,
    pub sentence_id: String,
}

impl PreparedSample {
    pub fn new(pair: &EegTextPair, vocab: &Vocabulary) -> Self {
        let mut text_ids = Vec::with_capacity(pair.tokens.len() + 2);
        text_ids.push(BOS);
        text_ids.extend(vocab.encode(&pair.tokens));
        text_ids.push(EOS);
        Self {
            input: build_input_sequence(pair),
            text_ids,
            subject_id: pair.eeg.subject_id.clone(),
            sentence_id: pair.eeg.sentence_id.clone(),
        }
    }

    /// Word tokens without the boundary ids.
    pub fn word_ids(&self) -> &[usize] {
        &self.text_ids[1..self.text_ids.len() - 1]
    }
}
