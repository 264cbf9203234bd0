use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{RunConfig, GRADCHECK_SEED};
use crate::cetmae::{CetMae, PreparedSample};
use crate::checkpoint::Checkpoint;
use crate::data::generate_synthetic;
use crate::error::Result;
use crate::nn::{
    param_gradcheck, DecoderLayer, EncoderLayer, Graph, Init, ParamId, ParamStore,
};
use crate::tensor::{finite_difference_check, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRow {
    pub name: String,
    pub max_rel_error: f64,
    pub threshold: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub rows: Vec<GradcheckRow>,
    pub pass: bool,
}

impl GradcheckReport {
    pub fn table(&self) -> String {
        let mut out = format!("{:<28} {:>12} {:>10}  result\n", "check", "max_rel_err", "threshold");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<28} {:>12.3e} {:>10.0e}  {}\n",
                r.name,
                r.max_rel_error,
                r.threshold,
                if r.pass { "PASS" } else { "FAIL" }
            ));
        }
        out
    }
}

type OpFn = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

/// Projects an op output onto fixed random weights so every output entry
/// contributes a distinct amount to the scalar.
fn probe(weights: Tensor) -> impl Fn(&mut Tape, Var) -> Result<Var> {
    move |t: &mut Tape, y: Var| {
        let w = t.constant(weights.clone());
        let p = t.mul(y, w)?;
        Ok(t.sum(p))
    }
}

fn op_cases(rng: &mut ChaCha8Rng, inject_fault: bool) -> Vec<(&'static str, Tensor, OpFn)> {
    let r = |rng: &mut ChaCha8Rng, s: &[usize]| Tensor::randn(s, 1.0, rng);
    let mut cases: Vec<(&'static str, Tensor, OpFn)> = Vec::new();
    let b = r(rng, &[4, 5]);
    let w35 = r(rng, &[3, 5]);
    cases.push(("matmul", r(rng, &[3, 4]), {
        let (b, pr) = (b.clone(), probe(w35.clone()));
        Box::new(move |t, x| {
            let c = t.constant(b.clone());
            let y = t.matmul(x, c)?;
            pr(t, y)
        })
    }));
    cases.push(("matmul_nt", r(rng, &[3, 4]), {
        let (c, pr) = (r(rng, &[5, 4]), probe(w35.clone()));
        Box::new(move |t, x| {
            let c = t.constant(c.clone());
            let y = t.matmul_nt(x, c)?;
            pr(t, y)
        })
    }));
    cases.push(("transpose", r(rng, &[5, 3]), {
        let pr = probe(w35.clone());
        Box::new(move |t, x| {
            let y = t.transpose(x)?;
            pr(t, y)
        })
    }));
    for name in ["add", "sub", "mul"] {
        let other = r(rng, &[3, 5]);
        let pr = probe(w35.clone());
        cases.push((name, r(rng, &[3, 5]), Box::new(move |t, x| {
            let c = t.constant(other.clone());
            let y = match name {
                "add" => t.add(c, x)?,
                "sub" => t.sub(c, x)?,
                _ => t.mul(c, x)?,
            };
            pr(t, y)
        })));
    }
    cases.push(("add_row_bias", r(rng, &[5]), {
        let (x0, pr) = (r(rng, &[3, 5]), probe(w35.clone()));
        Box::new(move |t, bias| {
            let x = t.constant(x0.clone());
            let y = t.add_row_bias(x, bias)?;
            pr(t, y)
        })
    }));
    cases.push(("scale", r(rng, &[3, 5]), {
        let pr = probe(w35.clone());
        Box::new(move |t, x| {
            let y = t.scale(x, -1.7);
            pr(t, y)
        })
    }));
    cases.push(("gelu", r(rng, &[3, 5]), {
        let pr = probe(w35.clone());
        Box::new(move |t, x| {
            let y = t.gelu(x);
            pr(t, y)
        })
    }));
    cases.push(("softmax", r(rng, &[3, 5]), {
        let pr = probe(w35.clone());
        Box::new(move |t, x| {
            let y = t.softmax(x)?;
            pr(t, y)
        })
    }));
    cases.push(("softmax_masked", r(rng, &[3, 5]), {
        let pr = probe(w35.clone());
        Box::new(move |t, x| {
            let excluded: Vec<bool> = (0..15).map(|i| i % 3 == 1).collect();
            let y = t.softmax_masked(x, Some(&excluded))?;
            pr(t, y)
        })
    }));
    cases.push(("layer_norm", r(rng, &[3, 5]), {
        let (gamma, beta, pr) = (r(rng, &[5]), r(rng, &[5]), probe(w35.clone()));
        Box::new(move |t, x| {
            let gm = t.constant(gamma.clone());
            let bt = t.constant(beta.clone());
            let y = t.layer_norm(x, gm, bt, 1e-5)?;
            pr(t, y)
        })
    }));
    cases.push(("layer_norm.gamma", r(rng, &[5]), {
        let (x0, beta, pr) = (r(rng, &[3, 5]), r(rng, &[5]), probe(w35.clone()));
        Box::new(move |t, gm| {
            let x = t.constant(x0.clone());
            let bt = t.constant(beta.clone());
            let y = t.layer_norm(x, gm, bt, 1e-5)?;
            pr(t, y)
        })
    }));
    cases.push(("slice_cols", r(rng, &[3, 7]), {
        let pr = probe(w35.clone());
        Box::new(move |t, x| {
            let y = t.slice_cols(x, 1, 5)?;
            pr(t, y)
        })
    }));
    cases.push(("concat_cols", r(rng, &[3, 2]), {
        let (c, pr) = (r(rng, &[3, 3]), probe(w35.clone()));
        Box::new(move |t, x| {
            let c = t.constant(c.clone());
            let y = t.concat_cols(&[c, x])?;
            pr(t, y)
        })
    }));
    cases.push(("concat_rows", r(rng, &[2, 5]), {
        let (c, pr) = (r(rng, &[1, 5]), probe(w35.clone()));
        Box::new(move |t, x| {
            let c = t.constant(c.clone());
            let y = t.concat_rows(&[x, c])?;
            pr(t, y)
        })
    }));
    cases.push(("gather_rows", r(rng, &[4, 5]), {
        let pr = probe(w35.clone());
        Box::new(move |t, x| {
            let y = t.gather_rows(x, &[2, 0, 2])?;
            pr(t, y)
        })
    }));
    cases.push(("replace_rows", r(rng, &[1, 5]), {
        let (x0, pr) = (r(rng, &[3, 5]), probe(w35.clone()));
        Box::new(move |t, fill| {
            let x = t.constant(x0.clone());
            let y = t.replace_rows(x, &[true, false, true], fill)?;
            pr(t, y)
        })
    }));
    cases.push(("add_to_rows", r(rng, &[4, 5]), {
        let (x0, pr) = (r(rng, &[3, 5]), probe(w35.clone()));
        Box::new(move |t, table| {
            let x = t.constant(x0.clone());
            let y = t.add_to_rows(x, &[false, true, true], table)?;
            pr(t, y)
        })
    }));
    cases.push(("masked_cross_entropy", r(rng, &[3, 7]), Box::new(|t, x| {
        t.masked_cross_entropy(x, &[1, 6, 3], &[true, false, true])
    })));
    cases.push(("masked_mse", r(rng, &[3, 5]), {
        let target = r(rng, &[3, 5]);
        Box::new(move |t, x| {
            let c = t.constant(target.clone());
            t.masked_mse(x, c, &[true, true, false])
        })
    }));
    cases.push(("mean", r(rng, &[3, 5]), Box::new(|t, x| {
        let sq = t.mul(x, x)?;
        Ok(t.mean(sq))
    })));
    cases.push(("weighted_mean_rows", r(rng, &[3, 5]), {
        let pr = probe(r(rng, &[1, 5]));
        Box::new(move |t, x| {
            let y = t.weighted_mean_rows(x, &[1.0, 0.0, 2.0])?;
            pr(t, y)
        })
    }));
    cases.push(("l2_normalize_rows", r(rng, &[3, 5]), {
        let pr = probe(w35.clone());
        Box::new(move |t, x| {
            let y = t.l2_normalize_rows(x);
            pr(t, y)
        })
    }));
    if inject_fault {
        cases.push(("injected_fault", r(rng, &[3, 5]), {
            let pr = probe(w35);
            Box::new(move |t, x| {
                let y = t.broken_identity(x);
                pr(t, y)
            })
        }));
    }
    cases
}

fn worst_param(params: &ParamStore, loss: impl Fn(&mut Graph) -> Result<Var>, h: f64, entries: Option<usize>, rng: &mut ChaCha8Rng) -> Result<f64> {
    // A key bias shifts all of a query's scores equally, so its exact
    // gradient is zero and central differences would only measure rounding.
    let ids: Vec<ParamId> = params
        .ids()
        .filter(|&id| !params.is_frozen(id) && !params.name(id).ends_with(".k.bias"))
        .collect();
    let checks = param_gradcheck(params, &ids, loss, h, entries, rng)?;
    Ok(checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max))
}

/// Finite-difference checks of every differentiable op, one encoder and
/// one decoder block, and the full desk-scale pretraining loss.
pub fn run_gradcheck(cfg: &RunConfig) -> Result<GradcheckReport> {
    let gc = cfg.gradcheck;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sub_seed(GRADCHECK_SEED));
    let mut rows = Vec::new();
    let mut push = |name: &str, err: f64, threshold: f64| {
        rows.push(GradcheckRow {
            name: name.to_string(),
            max_rel_error: err,
            threshold,
            pass: err <= threshold,
        })
    };
    for (name, x, f) in op_cases(&mut rng, gc.inject_fault) {
        let err = finite_difference_check(f, &x, gc.h)?;
        push(name, err, gc.op_threshold);
    }

    let mut blocks = ParamStore::new();
    let mut init = Init { store: &mut blocks, rng: &mut rng };
    let enc = EncoderLayer::new(&mut init, "enc", 8, 16, 2)?;
    let dec = DecoderLayer::new(&mut init, "dec", 8, 16, 2)?;
    let x = Tensor::randn(&[4, 8], 1.0, &mut rng);
    let y = Tensor::randn(&[3, 8], 1.0, &mut rng);
    let w = Tensor::randn(&[3, 8], 1.0, &mut rng);
    let pad = [false, false, true, false];
    let loss = |g: &mut Graph| -> Result<Var> {
        let xv = g.constant(x.clone());
        let m = enc.forward(g, xv, Some(&pad))?;
        let yv = g.constant(y.clone());
        let o = dec.forward(g, yv, m, Some(&pad))?;
        let wv = g.constant(w.clone());
        let p = g.mul(o, wv)?;
        Ok(g.sum(p))
    };
    let err = worst_param(&blocks, loss, gc.h, None, &mut rng)?;
    push("encoder+decoder blocks", err, gc.op_threshold);

    let err = end_to_end(cfg, &mut rng)?;
    push("cetmae loss (end to end)", err, gc.end_to_end_threshold);
    let pass = rows.iter().all(|r| r.pass);
    Ok(GradcheckReport { rows, pass })
}

fn end_to_end(cfg: &RunConfig, rng: &mut ChaCha8Rng) -> Result<f64> {
    let gc = cfg.gradcheck;
    let (ds, vocab) = generate_synthetic(&cfg.data.synthetic)?;
    let mut mcfg = cfg.model.clone();
    mcfg.feature_dim = ds.feature_dim;
    mcfg.vocab_size = vocab.len();
    let mut model = CetMae::new(mcfg, rng.random())?;
    let own = Checkpoint::from_store(&model.params, "cetmae", serde_json::Value::Null, None);
    model.install_text_encoder(&own)?;
    let mut samples = Vec::new();
    let mut plans = Vec::new();
    for (i, p) in ds.pairs.iter().enumerate() {
        let s = PreparedSample::new(p, &vocab);
        if let Ok(plan) = model.draw_plan(&s, i as u64) {
            samples.push(s);
            plans.push(plan);
        }
        if samples.len() == 2 {
            break;
        }
    }
    let batch: Vec<&PreparedSample> = samples.iter().collect();
    let loss = |g: &mut Graph| -> Result<Var> { Ok(model.batch_loss(g, &batch, &plans)?.total) };
    worst_param(&model.params, loss, gc.h, Some(gc.entries_per_tensor), rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_suite_passes_and_fault_is_caught() {
        let mut cfg = RunConfig::desk();
        let report = run_gradcheck(&cfg).unwrap();
        assert!(report.pass, "\n{}", report.table());
        assert_eq!(report, run_gradcheck(&cfg).unwrap());
        cfg.gradcheck.inject_fault = true;
        let report = run_gradcheck(&cfg).unwrap();
        assert!(!report.pass);
        let bad: Vec<&str> = report.rows.iter().filter(|r| !r.pass).map(|r| r.name.as_str()).collect();
        assert_eq!(bad, ["injected_fault"]);
    }
}
