use std::fs;
use std::path::Path;

use e2t_core::cetmae::Objective;
use e2t_core::data::{load_manifest, write_dataset};
use e2t_core::pipeline::{self, Overrides, PretrainRecord, RunConfig};
use e2t_core::Error;
use serde_json::{json, Value};

fn tiny(out: &Path, extra: Value) -> RunConfig {
    let mut doc = json!({
        "out_dir": out,
        "data": {"synthetic": {"n_subjects": 3, "n_sentences": 10, "vocab_size": 40,
                               "len_range": [3, 5], "feature_dim": 8}},
        "model": {"d_model": 16, "max_len": 16,
                  "eeg_encoder": {"layers": 1, "d_ff": 16, "heads": 2},
                  "multistream": {"layers": 1, "d_ff": 32, "heads": 2},
                  "eeg_decoder": {"layers": 1, "d_ff": 16, "heads": 2},
                  "text_encoder": {"layers": 1, "d_ff": 32, "heads": 2, "frozen": true}},
        "text_pretrain": {"epochs": 2},
        "pretrain": {"epochs": 3},
        "finetune": {"lm": {"layers_enc": 1, "layers_dec": 1, "d_model": 16, "d_ff": 32, "heads": 2},
                     "epochs": 2}
    });
    merge(&mut doc, extra);
    RunConfig::resolve(&doc, &Overrides::default()).unwrap()
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

fn read_log(path: &Path) -> Vec<PretrainRecord> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn gen_data_is_reproducible_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let a = tiny(&dir.path().join("a"), json!({}));
    let b = tiny(&dir.path().join("b"), json!({}));
    let out_a = pipeline::gen_data(&a).unwrap();
    let out_b = pipeline::gen_data(&b).unwrap();
    assert_eq!(out_a.pairs, 30);
    assert_eq!(fs::read(&out_a.manifest).unwrap(), fs::read(&out_b.manifest).unwrap());

    let (ds, vocab) = load_manifest(&out_a.manifest, None).unwrap();
    let again = write_dataset(&dir.path().join("c"), &ds, &vocab).unwrap();
    assert_eq!(fs::read(&out_a.manifest).unwrap(), fs::read(&again).unwrap());
    for rec in fs::read_to_string(&again).unwrap().lines() {
        let v: Value = serde_json::from_str(rec).unwrap();
        let f = v["feature_file"].as_str().unwrap();
        let src = out_a.manifest.parent().unwrap().join(f);
        assert_eq!(fs::read(src).unwrap(), fs::read(dir.path().join("c").join(f)).unwrap());
    }
}

#[test]
fn full_pipeline_per_subject() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), json!({}));
    let pre = pipeline::pretrain(&cfg).unwrap();
    let log = read_log(&pre.log);
    assert_eq!(log.len(), 3);
    assert!(log.iter().all(|r| r.total.is_finite() && r.val_total.is_some()));
    assert!(pre.best_checkpoint.is_file() && pre.final_checkpoint.is_file());

    let ft = pipeline::finetune(&cfg).unwrap();
    assert_eq!(ft.folds.len(), 1);
    assert!(ft.folds[0].transferred > 0);
    let run: Value = serde_json::from_slice(&fs::read(dir.path().join("finetune/main/run.json")).unwrap()).unwrap();
    assert_eq!(run["lr"], json!(1e-3));

    let ev = pipeline::eval(&cfg).unwrap();
    let conventions: Vec<&str> = ev.reports.iter().map(|r| r.convention.as_str()).collect();
    assert_eq!(conventions, ["retained", "collapsed"]);
    for r in &ev.reports {
        let csv = fs::read_to_string(&r.csv).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("group,bleu1,bleu2,bleu3,bleu4,rouge1_p,rouge1_r,rouge1_f,n"));
        let groups: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(groups.len(), 4, "three subjects and overall");
        assert_eq!(groups.last(), Some(&"overall"));
    }
    for line in fs::read_to_string(&ev.decode).unwrap().lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        let hyp: Vec<&str> = v["hypothesis"].as_array().unwrap().iter().map(|t| t.as_str().unwrap()).collect();
        assert!(!hyp.contains(&"<pad>"));
        if v["collapsed"] == json!(true) {
            assert!(hyp.windows(2).all(|w| w[0] != w[1]));
        } else {
            assert_eq!(hyp.len(), v["reference"].as_array().unwrap().len());
        }
    }
}

#[test]
fn loso_random_init_reports_one_row_per_subject() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(
        dir.path(),
        json!({"split": "leave_one_subject_out",
               "finetune": {"transfer": "random_init", "epochs": 1},
               "eval": {"decode_mode": "greedy", "max_decode_len": 4}}),
    );
    let ft = pipeline::finetune(&cfg).unwrap();
    assert_eq!(ft.folds.len(), 3);
    assert!(ft.folds.iter().all(|f| f.transferred == 0));
    let ev = pipeline::eval(&cfg).unwrap();
    for r in &ev.reports {
        assert!(r.csv.file_name().unwrap().to_str().unwrap().starts_with("scores_greedy_"));
        let folds: Vec<&str> = r.rows.iter().map(|x| x.group.as_str()).filter(|g| *g != "overall").collect();
        assert_eq!(folds.len(), 3);
        assert_eq!(r.rows.iter().filter(|x| x.group != "overall").map(|x| x.n_sentences).sum::<usize>(), 30);
    }
}

#[test]
fn finetune_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let mk = |sub: &str| tiny(&dir.path().join(sub), json!({"finetune": {"transfer": "random_init"}}));
    let a = pipeline::finetune(&mk("a")).unwrap();
    let b = pipeline::finetune(&mk("b")).unwrap();
    assert_eq!(fs::read(&a.folds[0].checkpoint).unwrap(), fs::read(&b.folds[0].checkpoint).unwrap());
    assert_eq!(a.folds[0].records, b.folds[0].records);
}

#[test]
fn ablation_variants_zero_their_terms() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("cet", json!({"model": {"objective": "cet"}})),
        ("etmae", json!({"model": {"objective": "et_mae"}})),
        ("joint", json!({"model": {"stream_mode": "joint_only"}})),
        ("random_all", json!({"model": {"mask_strategy": "random_all"}})),
    ];
    for (name, mut extra) in cases {
        merge(&mut extra, json!({"pretrain": {"epochs": 2}, "text_pretrain": {"epochs": 1}}));
        let cfg = tiny(&dir.path().join(name), extra);
        let out = pipeline::pretrain(&cfg).unwrap();
        for r in read_log(&out.log) {
            assert!(r.total.is_finite());
            match cfg.model.objective {
                Objective::Cet => assert_eq!((r.l_text, r.l_eeg), (0.0, 0.0), "{name}"),
                Objective::EtMae => assert_eq!(r.l_cl, 0.0, "{name}"),
                Objective::Full if name == "joint" => assert_eq!(r.l_cl, 0.0),
                Objective::Full => assert!(r.l_cl > 0.0 && r.l_text > 0.0 && r.l_eeg > 0.0),
            }
        }
    }
}

#[test]
fn missing_inputs_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), json!({}));
    assert!(matches!(pipeline::finetune(&cfg), Err(Error::Config(_))));
    assert!(matches!(pipeline::eval(&cfg), Err(Error::Config(_))));
    assert!(!dir.path().join("finetune").exists());
}
