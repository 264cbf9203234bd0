use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{Command, RunConfig, FINETUNE_SEED, MODEL_SEED, SPLIT_SEED, TRAIN_SEED};
use crate::cetmae::{pretrain_text_encoder, CetMae, CetMaeConfig, PreparedSample, PretrainOptions, Pretrainer};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Dtype};
use crate::data::{
    compute_nmr, generate_synthetic, load_manifest, make_split, write_dataset, Dataset, Partition,
    SplitMode, SplitPlan, Vocabulary,
};
use crate::e2t::{DecodeMode, DecodeResult, E2tConfig, E2tModel, FinetuneOptions, Finetuner, TransferMode};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, reports_to_csv, Grouping, ScoreReport, SentenceScore};
use crate::nn::Graph;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenDataOutput {
    pub manifest: PathBuf,
    pub pairs: usize,
    pub subjects: usize,
    pub nmr: f64,
}

/// One line of `pretrain/log.jsonl`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub epoch: usize,
    pub l_text: f64,
    pub l_eeg: f64,
    pub l_cl: f64,
    pub total: f64,
    pub masked_text_acc: f64,
    /// Total on the training set under fixed probe masks, after the epoch.
    pub probe_total: f64,
    pub val_total: Option<f64>,
    pub lr: f64,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainOutput {
    pub text_encoder_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub best_epoch: usize,
    pub log: PathBuf,
    pub records: Vec<PretrainRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldOutput {
    pub fold: String,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub transferred: usize,
    pub records: Vec<FinetuneRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneOutput {
    pub folds: Vec<FoldOutput>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConventionReport {
    /// `"retained"` or `"collapsed"`.
    pub convention: String,
    pub mode: DecodeMode,
    pub csv: PathBuf,
    pub rows: Vec<ScoreReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub decode: PathBuf,
    /// The convention named by `eval.collapse_repeats`.
    pub primary: String,
    pub reports: Vec<ConventionReport>,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r).expect("serializable record");
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn append_jsonl<T: Serialize>(file: &mut fs::File, path: &Path, row: &T) -> Result<()> {
    let mut line = serde_json::to_vec(row).expect("serializable record");
    line.push(b'\n');
    file.write_all(&line).map_err(|e| Error::io(path, e))
}

fn create_file(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

fn load_data(cfg: &RunConfig) -> Result<(Dataset, Vocabulary)> {
    match &cfg.data.manifest {
        Some(p) => load_manifest(p, None),
        None => generate_synthetic(&cfg.data.synthetic),
    }
}

/// The configured architecture with data-dependent sizes filled in.
fn model_config(cfg: &RunConfig, ds: &Dataset, vocab: &Vocabulary) -> Result<CetMaeConfig> {
    let mut m = cfg.model.clone();
    m.feature_dim = ds.feature_dim;
    m.vocab_size = vocab.len();
    m.validate()?;
    let longest = ds.pairs.iter().map(|p| p.tokens.len() + 2).max().unwrap_or(0);
    if longest > m.max_len {
        return Err(Error::Config(format!(
            "longest sentence needs {longest} positions, model.max_len is {}",
            m.max_len
        )));
    }
    Ok(m)
}

fn prepare(ds: &Dataset, vocab: &Vocabulary, idx: &[usize]) -> Vec<PreparedSample> {
    idx.iter().map(|&i| PreparedSample::new(&ds.pairs[i], vocab)).collect()
}

fn vocab_tokens(vocab: &Vocabulary) -> Vec<String> {
    vocab.content_tokens().to_vec()
}

fn fold_name(p: &Partition) -> String {
    p.fold.clone().unwrap_or_else(|| "main".into())
}

pub fn gen_data(cfg: &RunConfig) -> Result<GenDataOutput> {
    cfg.validate_for(Command::GenData)?;
    let (ds, vocab) = generate_synthetic(&cfg.data.synthetic)?;
    let manifest = write_dataset(&cfg.out_dir.join("data"), &ds, &vocab)?;
    let stats = compute_nmr(&ds)?;
    tracing::info!(pairs = ds.len(), nmr = stats.nmr, path = %manifest.display(), "dataset written");
    Ok(GenDataOutput {
        manifest,
        pairs: ds.len(),
        subjects: ds.subjects().len(),
        nmr: stats.nmr,
    })
}

/// Text-encoder warm-up, then masked-autoencoder pretraining on the
/// training part of the per-subject split. The best checkpoint is chosen by
/// validation total, or by the probe total when there is no validation data.
pub fn pretrain(cfg: &RunConfig) -> Result<PretrainOutput> {
    cfg.validate_for(Command::Pretrain)?;
    let (ds, vocab) = load_data(cfg)?;
    let mcfg = model_config(cfg, &ds, &vocab)?;
    let plan = SplitPlan {
        mode: SplitMode::PerSubject,
        seed: cfg.sub_seed(SPLIT_SEED),
    };
    let part = make_split(&ds, &plan)?.remove(0);
    let train = prepare(&ds, &vocab, &part.train);
    let val = prepare(&ds, &vocab, &part.val);
    let dir = cfg.out_dir.join("pretrain");
    create_dir(&dir)?;
    let config_json = serde_json::to_value(&mcfg).expect("serializable");

    let seqs: Vec<Vec<usize>> = train.iter().map(|s| s.text_ids.clone()).collect();
    let tcfg = cfg.text_pretrain_config();
    tracing::info!(epochs = tcfg.epochs, lr = tcfg.optimizer.lr, "text encoder warm-up");
    let (tstore, tlog) = pretrain_text_encoder(&seqs, mcfg.vocab_size, mcfg.d_model, mcfg.max_len, mcfg.text_encoder.stack(), &tcfg)?;
    let text_ckpt = dir.join("text_encoder.ckpt");
    save_checkpoint(&text_ckpt, &tstore, "text_encoder", config_json.clone(), Some(vocab_tokens(&vocab)), Dtype::F64)?;
    write_jsonl(&dir.join("text_log.jsonl"), &tlog)?;

    let mut model = CetMae::new(mcfg, cfg.sub_seed(MODEL_SEED))?;
    model.install_text_encoder(&Checkpoint::from_store(&tstore, "text_encoder", config_json.clone(), None))?;
    let p = cfg.pretrain;
    let opts = PretrainOptions {
        epochs: p.epochs,
        batch_size: p.batch_size,
        optimizer: p.optimizer,
        schedule: p.schedule,
        remask_each_epoch: p.remask_each_epoch,
        seed: cfg.sub_seed(TRAIN_SEED),
    };
    tracing::info!(
        epochs = p.epochs,
        batch_size = p.batch_size,
        lr = p.optimizer.lr,
        objective = ?model.cfg.objective,
        stream_mode = ?model.cfg.stream_mode,
        train = train.len(),
        val = val.len(),
        "pretraining"
    );
    let mut trainer = Pretrainer::new(model, opts)?;
    let log_path = dir.join("log.jsonl");
    let mut log = create_file(&log_path)?;
    let best_path = dir.join("best.ckpt");
    let vocab_list = Some(vocab_tokens(&vocab));
    let (mut best, mut best_epoch) = (f64::INFINITY, 0);
    let mut records = Vec::with_capacity(p.epochs);
    for epoch in 0..p.epochs {
        let e = trainer.run_epoch(&train, epoch)?;
        let (probe, _) = trainer.evaluate(&train)?;
        let val_total = if val.is_empty() {
            None
        } else {
            Some(trainer.evaluate(&val)?.0.total)
        };
        let rec = PretrainRecord {
            epoch,
            l_text: e.l_text,
            l_eeg: e.l_eeg,
            l_cl: e.l_cl,
            total: e.total,
            masked_text_acc: e.masked_text_acc,
            probe_total: probe.total,
            val_total,
            lr: p.schedule.lr_at(p.optimizer.lr, epoch),
            skipped: e.skipped,
        };
        append_jsonl(&mut log, &log_path, &rec)?;
        tracing::debug!(epoch, total = rec.total, probe = rec.probe_total, acc = rec.masked_text_acc, "epoch");
        let score = val_total.unwrap_or(probe.total);
        if score < best {
            best = score;
            best_epoch = epoch;
            save_checkpoint(&best_path, &trainer.model.params, "cetmae", config_json.clone(), vocab_list.clone(), Dtype::F64)?;
        }
        records.push(rec);
    }
    let final_path = dir.join("final.ckpt");
    save_checkpoint(&final_path, &trainer.model.params, "cetmae", config_json, vocab_list, Dtype::F64)?;
    if records.is_empty() {
        fs::copy(&final_path, &best_path).map_err(|e| Error::io(&best_path, e))?;
    }
    tracing::info!(best_epoch, best, "pretraining done");
    Ok(PretrainOutput {
        text_encoder_checkpoint: text_ckpt,
        final_checkpoint: final_path,
        best_checkpoint: best_path,
        best_epoch,
        log: log_path,
        records,
    })
}

fn e2t_config(cfg: &RunConfig, ds: &Dataset, vocab: &Vocabulary, ckpt: Option<&Checkpoint>) -> Result<E2tConfig> {
    let mut mcfg = match ckpt {
        Some(c) => c.config::<CetMaeConfig>()?,
        None => model_config(cfg, ds, vocab)?,
    };
    if mcfg.feature_dim != ds.feature_dim {
        return Err(Error::Transfer(format!(
            "checkpoint expects {}-dim features, data has {}",
            mcfg.feature_dim, ds.feature_dim
        )));
    }
    mcfg.vocab_size = vocab.len();
    let e = E2tConfig::from_cetmae(&mcfg, cfg.finetune.lm, cfg.finetune.transfer);
    e.validate()?;
    Ok(e)
}

fn mean_loss(model: &E2tModel, samples: &[PreparedSample]) -> Result<f64> {
    let mut sum = 0.0;
    for s in samples {
        let mut g = Graph::new(&model.params);
        let l = model.sample_loss(&mut g, s)?;
        sum += g.value(l).item();
    }
    Ok(sum / samples.len() as f64)
}

/// Fine-tunes one model per partition: a single one for the per-subject
/// split, one per held-out subject under LOSO.
pub fn finetune(cfg: &RunConfig) -> Result<FinetuneOutput> {
    cfg.validate_for(Command::Finetune)?;
    let (ds, vocab) = load_data(cfg)?;
    let ckpt = match cfg.finetune.transfer {
        TransferMode::RandomInit => None,
        _ => Some(load_checkpoint(&cfg.cetmae_checkpoint())?),
    };
    let ecfg = e2t_config(cfg, &ds, &vocab, ckpt.as_ref())?;
    let plan = SplitPlan {
        mode: cfg.split,
        seed: cfg.sub_seed(SPLIT_SEED),
    };
    let f = &cfg.finetune;
    let mut folds = Vec::new();
    for part in make_split(&ds, &plan)? {
        let fold = fold_name(&part);
        let train = prepare(&ds, &vocab, &part.train);
        let val = prepare(&ds, &vocab, &part.val);
        if train.is_empty() {
            return Err(Error::Data(format!("fold {fold} has no training pairs")));
        }
        let dir = cfg.out_dir.join("finetune").join(&fold);
        create_dir(&dir)?;
        let (model, report) = E2tModel::assemble(ecfg.clone(), ckpt.as_ref(), cfg.sub_seed(FINETUNE_SEED))?;
        let transferred = report.as_ref().map_or(0, |r| r.loaded.len());
        let header = serde_json::json!({
            "fold": fold,
            "lr": f.optimizer.lr,
            "epochs": f.epochs,
            "batch_size": f.batch_size,
            "schedule": f.schedule,
            "transfer": f.transfer,
            "transferred_tensors": transferred,
            "train": train.len(),
            "val": val.len(),
        });
        tracing::info!(fold = %fold, lr = f.optimizer.lr, epochs = f.epochs, transfer = ?f.transfer, transferred, "fine-tuning");
        let run_path = dir.join("run.json");
        fs::write(&run_path, serde_json::to_vec_pretty(&header).expect("json")).map_err(|e| Error::io(&run_path, e))?;

        let opts = FinetuneOptions {
            batch_size: f.batch_size,
            optimizer: f.optimizer,
            schedule: f.schedule,
            seed: cfg.sub_seed(FINETUNE_SEED),
        };
        let mut tuner = Finetuner::new(model, opts)?;
        let log_path = dir.join("log.jsonl");
        let mut log = create_file(&log_path)?;
        let mut records = Vec::with_capacity(f.epochs);
        for epoch in 0..f.epochs {
            let loss = tuner.run_epoch(&train, epoch)?;
            let val_loss = if val.is_empty() {
                None
            } else {
                Some(mean_loss(&tuner.model, &val)?)
            };
            let rec = FinetuneRecord {
                epoch,
                loss,
                val_loss,
                lr: f.schedule.lr_at(f.optimizer.lr, epoch),
            };
            append_jsonl(&mut log, &log_path, &rec)?;
            tracing::debug!(fold = %fold, epoch, loss, "epoch");
            records.push(rec);
        }
        let model = tuner.into_model();
        let path = dir.join("model.ckpt");
        let config_json = serde_json::to_value(&model.cfg).expect("serializable");
        save_checkpoint(&path, &model.params, "e2t", config_json, Some(vocab_tokens(&vocab)), Dtype::F64)?;
        folds.push(FoldOutput {
            fold,
            checkpoint: path,
            log: log_path,
            transferred,
            records,
        });
    }
    Ok(FinetuneOutput { folds })
}

fn mode_name(m: DecodeMode) -> &'static str {
    match m {
        DecodeMode::TeacherForced => "teacher_forced",
        DecodeMode::Greedy => "greedy",
    }
}

/// Decodes every test pair and scores both repeat conventions. Reports hold
/// one row per subject (per fold under LOSO) followed by `overall`.
pub fn eval(cfg: &RunConfig) -> Result<EvalOutput> {
    cfg.validate_for(Command::Eval)?;
    let (ds, vocab) = load_data(cfg)?;
    let plan = SplitPlan {
        mode: cfg.split,
        seed: cfg.sub_seed(SPLIT_SEED),
    };
    let parts = make_split(&ds, &plan)?;
    let loso = cfg.split == SplitMode::LeaveOneSubjectOut;
    let mut decoded: Vec<(DecodeResult, Option<String>)> = Vec::new();
    for part in &parts {
        let fold = fold_name(part);
        if part.test.is_empty() {
            return Err(Error::Config(format!("split fold {fold} has no test pairs")));
        }
        let path = match &cfg.eval.checkpoint {
            Some(p) => p.clone(),
            None => cfg.out_dir.join("finetune").join(&fold).join("model.ckpt"),
        };
        if !path.is_file() {
            return Err(Error::Config(format!(
                "no fine-tuned checkpoint for fold {fold} at {}",
                path.display()
            )));
        }
        let model = E2tModel::restore(&load_checkpoint(&path)?)?;
        if model.cfg.vocab_size != vocab.len() {
            return Err(Error::Transfer(format!(
                "checkpoint vocabulary has {} entries, data has {}",
                model.cfg.vocab_size,
                vocab.len()
            )));
        }
        for s in prepare(&ds, &vocab, &part.test) {
            let r = model.decode(&s, &vocab, cfg.eval.decode_mode, cfg.eval.max_decode_len)?;
            decoded.push((r, part.fold.clone()));
        }
    }
    let dir = cfg.out_dir.join("eval");
    create_dir(&dir)?;
    let decode_path = dir.join("decode.jsonl");
    let mut records = Vec::with_capacity(decoded.len() * 2);
    for (r, _) in &decoded {
        records.push(r.clone());
        records.push(r.collapse());
    }
    write_jsonl(&decode_path, &records)?;

    let mode = cfg.eval.decode_mode;
    let grouping = if loso { Grouping::Fold } else { Grouping::Subject };
    let mut reports = Vec::new();
    for collapsed in [false, true] {
        let convention = if collapsed { "collapsed" } else { "retained" };
        let scores: Vec<SentenceScore> = decoded
            .iter()
            .map(|(r, fold)| {
                let r = if collapsed { r.collapse() } else { r.clone() };
                SentenceScore::compute(&r.hypothesis, &r.reference, &r.subject_id, fold.as_deref())
            })
            .collect();
        let mut rows = aggregate(&scores, grouping)?;
        rows.extend(aggregate(&scores, Grouping::Overall)?);
        let csv = dir.join(format!("scores_{}_{convention}.csv", mode_name(mode)));
        fs::write(&csv, reports_to_csv(&rows)).map_err(|e| Error::io(&csv, e))?;
        tracing::info!(convention, mode = mode_name(mode), bleu1 = rows.last().map(|r| r.bleu[0]), "scored");
        reports.push(ConventionReport {
            convention: convention.into(),
            mode,
            csv,
            rows,
        });
    }
    Ok(EvalOutput {
        decode: decode_path,
        primary: if cfg.eval.collapse_repeats { "collapsed" } else { "retained" }.into(),
        reports,
    })
}
