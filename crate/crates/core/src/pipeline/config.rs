use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cetmae::{CetMaeConfig, Preset, TextPretrainConfig};
use crate::data::{SplitMode, SyntheticConfig, FULL_FEATURE_DIM};
use crate::e2t::{DecodeMode, LmConfig, TransferMode};
use crate::error::{Error, Result};
use crate::optim::{AdamWConfig, LrSchedule};
use crate::seed::derive_seed;

/// Where pairs come from. A manifest, when set, wins over the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub manifest: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextPretrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub mask_ratio: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub schedule: LrSchedule,
    pub remask_each_epoch: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    /// Defaults to `<out_dir>/pretrain/best.ckpt`.
    pub cetmae_checkpoint: Option<PathBuf>,
    pub lm: LmConfig,
    pub transfer: TransferMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub schedule: LrSchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Fine-tuned model to score. Defaults to the fold checkpoints under
    /// `<out_dir>/finetune/`.
    pub checkpoint: Option<PathBuf>,
    pub decode_mode: DecodeMode,
    pub collapse_repeats: bool,
    pub max_decode_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckSection {
    pub h: f64,
    pub op_threshold: f64,
    pub end_to_end_threshold: f64,
    /// Entries probed per parameter tensor in the end-to-end check.
    pub entries_per_tensor: usize,
    /// Adds a row whose backward rule is deliberately wrong.
    pub inject_fault: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataSection,
    pub split: SplitMode,
    /// `feature_dim` and `vocab_size` are replaced by the loaded data's.
    pub model: CetMaeConfig,
    pub text_pretrain: TextPretrainSection,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneSection,
    pub eval: EvalSection,
    pub gradcheck: GradcheckSection,
}

/// Command-line level replacements applied after the file is merged.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GenData,
    Pretrain,
    Finetune,
    Eval,
    Gradcheck,
}

// Sub-seed streams.
pub(crate) const SPLIT_SEED: u64 = 1;
pub(crate) const TEXT_SEED: u64 = 2;
pub(crate) const MODEL_SEED: u64 = 3;
pub(crate) const TRAIN_SEED: u64 = 4;
pub(crate) const FINETUNE_SEED: u64 = 5;
pub(crate) const GRADCHECK_SEED: u64 = 6;

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Paper => Self::paper(),
            Preset::Desk => Self::desk(),
        }
    }

    pub fn desk() -> Self {
        let synthetic = SyntheticConfig::default();
        Self {
            preset: Preset::Desk,
            seed: 0,
            out_dir: PathBuf::from("runs/desk"),
            model: CetMaeConfig::desk(synthetic.vocab_size, synthetic.feature_dim),
            data: DataSection { manifest: None, synthetic },
            split: SplitMode::PerSubject,
            text_pretrain: TextPretrainSection {
                epochs: 20,
                batch_size: 8,
                mask_ratio: 0.15,
                lr: 1e-3,
            },
            pretrain: PretrainSection {
                epochs: 200,
                batch_size: 8,
                optimizer: AdamWConfig::default(),
                schedule: LrSchedule::Constant,
                remask_each_epoch: true,
            },
            finetune: FinetuneSection {
                cetmae_checkpoint: None,
                lm: LmConfig {
                    layers_enc: 2,
                    layers_dec: 2,
                    d_model: 64,
                    d_ff: 128,
                    heads: 4,
                },
                transfer: TransferMode::EegStream,
                epochs: 60,
                batch_size: 8,
                optimizer: AdamWConfig::default(),
                schedule: LrSchedule::Constant,
            },
            eval: EvalSection {
                checkpoint: None,
                decode_mode: DecodeMode::TeacherForced,
                collapse_repeats: true,
                max_decode_len: 32,
            },
            gradcheck: GradcheckSection {
                h: 1e-5,
                op_threshold: 1e-4,
                end_to_end_threshold: 1e-3,
                entries_per_tensor: 3,
                inject_fault: false,
            },
        }
    }

    pub fn paper() -> Self {
        let synthetic = SyntheticConfig {
            n_subjects: 12,
            n_sentences: 100,
            vocab_size: 2000,
            len_range: (4, 30),
            feature_dim: FULL_FEATURE_DIM,
            ..SyntheticConfig::default()
        };
        let optimizer = AdamWConfig {
            lr: 5e-7,
            ..AdamWConfig::default()
        };
        let cosine = LrSchedule::Cosine {
            t_max: 20,
            eta_min: 0.0,
        };
        let desk = Self::desk();
        Self {
            preset: Preset::Paper,
            out_dir: PathBuf::from("runs/paper"),
            model: CetMaeConfig::paper(synthetic.vocab_size, synthetic.feature_dim),
            data: DataSection { manifest: None, synthetic },
            pretrain: PretrainSection {
                epochs: 100,
                batch_size: 32,
                optimizer,
                schedule: cosine,
                remask_each_epoch: true,
            },
            finetune: FinetuneSection {
                cetmae_checkpoint: None,
                lm: LmConfig {
                    layers_enc: 12,
                    layers_dec: 12,
                    d_model: 1024,
                    d_ff: 4096,
                    heads: 16,
                },
                transfer: TransferMode::EegStream,
                epochs: 50,
                batch_size: 32,
                optimizer: AdamWConfig { lr: 2e-7, ..optimizer },
                schedule: cosine,
            },
            ..desk
        }
    }

    /// Expands the preset named in `doc` (or in `ov`), merges `doc` over it,
    /// applies `ov` and validates. Touches no files except to check that
    /// referenced inputs exist.
    pub fn resolve(doc: &Value, ov: &Overrides) -> Result<Self> {
        if !doc.is_object() && !doc.is_null() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        let named = match doc.get("preset") {
            None | Some(Value::Null) => None,
            Some(v) => Some(
                serde_json::from_value::<Preset>(v.clone())
                    .map_err(|_| Error::Config(format!("unknown preset {v}")))?,
            ),
        };
        let preset = ov.preset.or(named).unwrap_or(Preset::Desk);
        let mut merged = serde_json::to_value(Self::preset(preset)).expect("serializable");
        if let Value::Object(_) = doc {
            merge(&mut merged, doc);
        }
        merged["preset"] = serde_json::to_value(preset).expect("serializable");
        let explicit_data_seed = doc.pointer("/data/synthetic/seed").is_some();
        let mut cfg: RunConfig =
            serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(s) = ov.seed {
            cfg.seed = s;
        }
        if let Some(o) = &ov.out_dir {
            cfg.out_dir = o.clone();
        }
        if !explicit_data_seed {
            cfg.data.synthetic.seed = cfg.seed;
        }
        if cfg.data.manifest.is_none() {
            cfg.model.feature_dim = cfg.data.synthetic.feature_dim;
            cfg.model.vocab_size = cfg.data.synthetic.vocab_size;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, ov: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::resolve(&doc, ov)
    }

    // Negated comparisons below also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.out_dir.as_os_str().is_empty() {
            return bad("out_dir is empty".into());
        }
        match &self.data.manifest {
            Some(p) if !p.is_file() => return bad(format!("manifest {} does not exist", p.display())),
            Some(_) => {}
            None => {
                self.data.synthetic.validate()?;
                let longest = self.data.synthetic.len_range.1 + 2;
                if longest > self.model.max_len {
                    return bad(format!(
                        "sentences up to {longest} tokens exceed model.max_len {}",
                        self.model.max_len
                    ));
                }
            }
        }
        self.model.validate()?;
        let positive = [
            ("text_pretrain.batch_size", self.text_pretrain.batch_size),
            ("pretrain.batch_size", self.pretrain.batch_size),
            ("finetune.batch_size", self.finetune.batch_size),
            ("eval.max_decode_len", self.eval.max_decode_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        for (name, lr) in [
            ("text_pretrain.lr", self.text_pretrain.lr),
            ("pretrain.optimizer.lr", self.pretrain.optimizer.lr),
            ("finetune.optimizer.lr", self.finetune.optimizer.lr),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be a positive number, got {lr}"));
            }
        }
        if !(0.0..=1.0).contains(&self.text_pretrain.mask_ratio) {
            return bad("text_pretrain.mask_ratio outside [0, 1]".into());
        }
        let lm = self.finetune.lm;
        if lm.d_model != self.model.d_model {
            return bad(format!(
                "finetune.lm.d_model {} must equal model.d_model {}",
                lm.d_model, self.model.d_model
            ));
        }
        if lm.heads == 0 || !lm.d_model.is_multiple_of(lm.heads) || lm.layers_dec == 0 || lm.d_ff == 0 {
            return bad(format!("finetune.lm is not a valid stack: {lm:?}"));
        }
        let g = self.gradcheck;
        if !(g.h > 0.0) || g.entries_per_tensor == 0 {
            return bad("gradcheck.h and entries_per_tensor must be positive".into());
        }
        Ok(())
    }

    /// Checks the inputs a specific command reads.
    pub fn validate_for(&self, cmd: Command) -> Result<()> {
        match cmd {
            Command::Finetune if self.finetune.transfer != TransferMode::RandomInit => {
                let p = self.cetmae_checkpoint();
                if !p.is_file() {
                    return Err(Error::Config(format!(
                        "pretraining checkpoint {} does not exist",
                        p.display()
                    )));
                }
            }
            Command::Eval => {
                if let Some(p) = &self.eval.checkpoint {
                    if !p.is_file() {
                        return Err(Error::Config(format!("checkpoint {} does not exist", p.display())));
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn cetmae_checkpoint(&self) -> PathBuf {
        self.finetune
            .cetmae_checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join("pretrain").join("best.ckpt"))
    }

    pub fn sub_seed(&self, stream: u64) -> u64 {
        derive_seed(self.seed, stream)
    }

    pub fn text_pretrain_config(&self) -> TextPretrainConfig {
        TextPretrainConfig {
            epochs: self.text_pretrain.epochs,
            batch_size: self.text_pretrain.batch_size,
            mask_ratio: self.text_pretrain.mask_ratio,
            optimizer: AdamWConfig {
                lr: self.text_pretrain.lr,
                ..AdamWConfig::default()
            },
            seed: self.sub_seed(TEXT_SEED),
        }
    }
}

/// Recursive object merge; non-object values in `patch` replace.
fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}
