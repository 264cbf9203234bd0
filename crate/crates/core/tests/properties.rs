use std::collections::{HashMap, HashSet};

use e2t_core::data::{generate_synthetic, make_split, SplitMode, SplitPlan, SyntheticConfig, Vocabulary, BOS, EOS};
use e2t_core::masking::{mask_eeg, mask_text, EegMaskStrategy};
use e2t_core::metrics::{bleu_n, rouge1};
use e2t_core::tensor::{finite_difference_check, Tape, Tensor, Var};
use e2t_core::Result;
use proptest::prelude::*;

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-2.0f64..2.0, r * c).prop_map(move |d| Tensor::new(vec![r, c], d).unwrap())
    })
}

/// Deterministic, non-uniform probe weights so that summing the output does
/// not hide errors in ops whose rows sum to a constant.
fn probe(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|i| (1.7 * i as f64 + 0.3).sin()).collect()).unwrap()
}

fn probed(t: &mut Tape, y: Var) -> Result<Var> {
    let w = t.constant(probe(t.shape(y)));
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

fn fd(x: &Tensor, op: impl Fn(&mut Tape, Var) -> Result<Var>) -> f64 {
    finite_difference_check(
        |t, v| {
            let y = op(t, v)?;
            probed(t, y)
        },
        x,
        1e-5,
    )
    .unwrap()
}

const OP_TOL: f64 = 1e-4;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn elementwise_and_shape_op_gradients(x in matrix(4, 5)) {
        let (r, c) = (x.rows(), x.cols());
        let other = probe(&[c, 3]);
        let e = fd(&x, |t, v| {
            let w = t.constant(other.clone());
            t.matmul(v, w)
        });
        prop_assert!(e <= OP_TOL, "matmul {e}");
        prop_assert!(fd(&x, |t, v| t.transpose(v)) <= OP_TOL);
        prop_assert!(fd(&x, |t, v| t.mul(v, v)) <= OP_TOL);
        prop_assert!(fd(&x, |t, v| Ok(t.gelu(v))) <= OP_TOL);
        prop_assert!(fd(&x, |t, v| Ok(t.scale(v, -0.7))) <= OP_TOL);
        prop_assert!(fd(&x, |t, v| t.concat_cols(&[v, v])) <= OP_TOL);
        prop_assert!(fd(&x, |t, v| t.concat_rows(&[v, v])) <= OP_TOL);
        let idx: Vec<usize> = (0..r + 2).map(|i| (i * 7) % r).collect();
        prop_assert!(fd(&x, |t, v| t.gather_rows(v, &idx)) <= OP_TOL);
        prop_assert!(fd(&x, |t, v| t.slice_cols(v, c / 2, c - c / 2)) <= OP_TOL);
        prop_assert!(fd(&x, |t, v| Ok(t.mean(v))) <= OP_TOL);
    }

    #[test]
    fn normalising_op_gradients(x in matrix(4, 5)) {
        let c = x.cols();
        prop_assert!(fd(&x, |t, v| t.softmax(v)) <= OP_TOL);
        let g = probe(&[c]);
        let e = fd(&x, |t, v| {
            let gamma = t.constant(g.clone());
            let beta = t.constant(Tensor::zeros(&[c]));
            t.layer_norm(v, gamma, beta, 1e-5)
        });
        prop_assert!(e <= OP_TOL, "layer_norm {e}");
        prop_assert!(fd(&x, |t, v| Ok(t.l2_normalize_rows(v))) <= OP_TOL);
    }

    #[test]
    fn loss_op_gradients(x in matrix(4, 6), seed in 0usize..1000) {
        let (r, c) = (x.rows(), x.cols());
        let targets: Vec<usize> = (0..r).map(|i| (seed + 3 * i) % c).collect();
        let mut flags: Vec<bool> = (0..r).map(|i| (seed >> i) & 1 == 1).collect();
        flags[seed % r] = true;
        let ce = finite_difference_check(|t, v| t.masked_cross_entropy(v, &targets, &flags), &x, 1e-5).unwrap();
        prop_assert!(ce <= OP_TOL);
        let target = probe(&[r, c]);
        let mse = finite_difference_check(|t, v| {
            let y = t.constant(target.clone());
            t.masked_mse(v, y, &flags)
        }, &x, 1e-5).unwrap();
        prop_assert!(mse <= OP_TOL);
    }

    #[test]
    fn softmax_rows_are_distributions(x in matrix(5, 7)) {
        let mut t = Tape::new();
        let v = t.leaf(x.clone());
        let s = t.softmax(v).unwrap();
        let out = t.value(s);
        for i in 0..out.rows() {
            let row = out.row(i);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p <= 1.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn second_backward_doubles_gradients(x in matrix(3, 4)) {
        let mut t = Tape::new();
        let v = t.leaf(x.clone());
        let g = t.gelu(v);
        let s = t.softmax(g).unwrap();
        let loss = probed(&mut t, s).unwrap();
        t.backward(loss).unwrap();
        let once = t.grad(v).unwrap().clone();
        t.backward(loss).unwrap();
        for (a, b) in once.data().iter().zip(t.grad(v).unwrap().data()) {
            prop_assert_eq!(2.0 * a, *b);
        }
    }
}

fn sentence() -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(0u32..6, 1..12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn metrics_ignore_token_identity(h in sentence(), r in sentence(), shift in 1u32..1000) {
        // Any injective relabelling preserves every score.
        let relabel = |s: &[u32]| s.iter().map(|&x| x * 7919 + shift).collect::<Vec<_>>();
        let (h2, r2) = (relabel(&h), relabel(&r));
        for n in 1..=4 {
            prop_assert_eq!(bleu_n(&h, &[&r], n), bleu_n(&h2, &[&r2], n));
        }
        prop_assert_eq!(rouge1(&h, &r), rouge1(&h2, &r2));
    }

    #[test]
    fn rouge_swap_exchanges_precision_and_recall(h in sentence(), r in sentence()) {
        let a = rouge1(&h, &r);
        let b = rouge1(&r, &h);
        prop_assert_eq!(a.p, b.r);
        prop_assert_eq!(a.r, b.p);
        prop_assert!((a.f - b.f).abs() <= 1e-15);
        prop_assert!((0.0..=1.0).contains(&a.f));
    }

    #[test]
    fn prefix_bleu1_is_the_brevity_penalty(len in 2usize..20, cut in 1usize..20) {
        let reference: Vec<u32> = (0..len as u32).collect();
        let k = cut.min(len);
        let hyp = &reference[..k];
        let want = if k == len { 1.0 } else { (1.0 - len as f64 / k as f64).exp() };
        prop_assert_eq!(bleu_n(hyp, &[&reference], 1), want);
    }

    #[test]
    fn bleu_is_bounded(h in sentence(), r in sentence()) {
        for n in 1..=4 {
            let b = bleu_n(&h, &[&r], n);
            prop_assert!(b > 0.0 && b <= 1.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn text_masks_hit_exact_counts_and_skip_specials(words in prop::collection::vec(5usize..50, 1..30),
                                                     ratio in 0.05f64..1.0, seed: u64) {
        let mut ids = vec![BOS];
        ids.extend(&words);
        ids.push(EOS);
        let flags = mask_text(&ids, ratio, seed).unwrap();
        let want = ((ratio * words.len() as f64).round() as usize).max(1);
        prop_assert_eq!(flags.iter().filter(|&&f| f).count(), want);
        for (id, f) in ids.iter().zip(&flags) {
            prop_assert!(!(*f && Vocabulary::is_special(*id)));
        }
    }

    #[test]
    fn eeg_masks_respect_natural_gaps(present in prop::collection::vec(any::<bool>(), 1..30),
                                      ratio in 0.0f64..1.0, seed: u64, forced: bool) {
        prop_assume!(present.iter().any(|&p| p));
        let mut natural: Vec<bool> = present.iter().map(|p| !p).collect();
        natural.push(false);
        let strategy = if forced { EegMaskStrategy::ForcedSentence } else { EegMaskStrategy::RandomAll };
        let flags = mask_eeg(&natural, ratio, strategy, seed).unwrap();
        prop_assert_eq!(flags.len(), natural.len());
        prop_assert!(flags.iter().zip(&natural).all(|(f, n)| !(*f && *n)));
        if forced {
            prop_assert!(flags[flags.len() - 1]);
        }
        prop_assert_eq!(&flags, &mask_eeg(&natural, ratio, strategy, seed).unwrap());
    }
}

#[test]
fn word_mask_fraction_over_many_draws() {
    // 1000 draws of a 20-word sequence with 4 natural gaps, so 12 of the
    // 16 present words are hidden each time.
    let natural: Vec<bool> = (0..21).map(|i| i < 12 && i % 3 == 0).collect();
    let present = natural[..20].iter().filter(|n| !**n).count();
    let mut hits = [0usize; 21];
    for seed in 0..1000 {
        let flags = mask_eeg(&natural, 0.75, EegMaskStrategy::ForcedSentence, seed).unwrap();
        for (h, f) in hits.iter_mut().zip(&flags) {
            *h += *f as usize;
        }
    }
    assert_eq!(hits[20], 1000);
    let masked: usize = hits[..20].iter().sum();
    let frac = masked as f64 / (1000 * present) as f64;
    assert_eq!(frac, 0.75);
    // Every present word is hit close to uniformly.
    for (i, &h) in hits[..20].iter().enumerate() {
        if natural[i] {
            assert_eq!(h, 0);
        } else {
            assert!((h as f64 / 1000.0 - frac).abs() < 0.06, "word {i}: {h}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn splits_are_disjoint_and_cover_the_data(subjects in 2usize..5, sentences in 10usize..25, seed: u64) {
        let cfg = SyntheticConfig {
            n_subjects: subjects,
            n_sentences: sentences,
            vocab_size: 30,
            len_range: (2, 4),
            feature_dim: 8,
            seed,
            ..SyntheticConfig::default()
        };
        let (ds, _) = generate_synthetic(&cfg).unwrap();
        for mode in [SplitMode::PerSubject, SplitMode::LeaveOneSubjectOut] {
            let parts = make_split(&ds, &SplitPlan { mode, seed }).unwrap();
            for p in &parts {
                let all: Vec<usize> = p.train.iter().chain(&p.val).chain(&p.test).copied().collect();
                let set: HashSet<usize> = all.iter().copied().collect();
                prop_assert_eq!(set.len(), all.len());
                prop_assert_eq!(set.len(), ds.len());
                if let Some(fold) = &p.fold {
                    prop_assert!(p.test.iter().all(|&i| &ds.pairs[i].eeg.subject_id == fold));
                    prop_assert!(p.train.iter().chain(&p.val).all(|&i| &ds.pairs[i].eeg.subject_id != fold));
                }
            }
            if mode == SplitMode::PerSubject {
                let mut per: HashMap<&str, usize> = HashMap::new();
                for &i in &parts[0].test {
                    *per.entry(ds.pairs[i].eeg.subject_id.as_str()).or_default() += 1;
                }
                prop_assert!(per.values().all(|&n| n == sentences / 10));
            } else {
                prop_assert_eq!(parts.len(), subjects);
            }
        }
    }
}
