//! Training-time masks for text tokens and EEG feature tokens.
//!
//! Natural masks (missing fixations) come from the data and are never
//! selected again as training masks.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::nn::Graph;
use crate::seed::derive_seed;
use crate::tensor::Var;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EegMaskStrategy {
    /// Sentence position always masked; words masked at random.
    ForcedSentence,
    /// Sentence position is an ordinary candidate.
    RandomAll,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub text_masked: Vec<bool>,
    /// Length N+1; last position is the sentence-level feature.
    pub eeg_masked: Vec<bool>,
    pub eeg_natural: Vec<bool>,
    pub text_ratio: f64,
    pub eeg_ratio: f64,
    pub strategy: EegMaskStrategy,
    pub seed: u64,
}

impl MaskPlan {
    /// Masks for one sample; text and EEG draws use independent streams of `seed`.
    pub fn draw(
        text_ids: &[usize],
        eeg_natural: &[bool],
        text_ratio: f64,
        eeg_ratio: f64,
        strategy: EegMaskStrategy,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            text_masked: mask_text(text_ids, text_ratio, derive_seed(seed, 1))?,
            eeg_masked: mask_eeg(eeg_natural, eeg_ratio, strategy, derive_seed(seed, 2))?,
            eeg_natural: eeg_natural.to_vec(),
            text_ratio,
            eeg_ratio,
            strategy,
            seed,
        })
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("mask ratio {ratio} outside [0, 1]")));
    }
    Ok(())
}

fn choose(candidates: &[usize], k: usize, seed: u64, len: usize) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flags = vec![false; len];
    for i in sample(&mut rng, candidates.len(), k.min(candidates.len())) {
        flags[candidates[i]] = true;
    }
    flags
}

/// Flags `round(ratio × content tokens)` positions (at least one), never a
/// special token.
pub fn mask_text(ids: &[usize], ratio: f64, seed: u64) -> Result<Vec<bool>> {
    check_ratio(ratio)?;
    let content: Vec<usize> = (0..ids.len())
        .filter(|&i| !Vocabulary::is_special(ids[i]))
        .collect();
    if content.is_empty() {
        return Err(Error::Degenerate("no maskable text tokens".into()));
    }
    let k = ((ratio * content.len() as f64).round() as usize).max(1);
    Ok(choose(&content, k, seed, ids.len()))
}

/// `natural` has one flag per word plus the trailing sentence position.
pub fn mask_eeg(
    natural: &[bool],
    ratio: f64,
    strategy: EegMaskStrategy,
    seed: u64,
) -> Result<Vec<bool>> {
    check_ratio(ratio)?;
    let n = natural.len();
    if n == 0 || natural[n - 1] {
        return Err(Error::Contract(
            "EEG sequence must end with a present sentence feature".into(),
        ));
    }
    let words: Vec<usize> = (0..n - 1).filter(|&i| !natural[i]).collect();
    if words.is_empty() {
        return Err(Error::Degenerate("no present word-level EEG features".into()));
    }
    match strategy {
        EegMaskStrategy::ForcedSentence => {
            let k = (ratio * words.len() as f64).round() as usize;
            let mut flags = choose(&words, k, seed, n);
            flags[n - 1] = true;
            Ok(flags)
        }
        EegMaskStrategy::RandomAll => {
            let mut candidates = words;
            candidates.push(n - 1);
            let k = ((ratio * candidates.len() as f64).round() as usize).max(1);
            Ok(choose(&candidates, k, seed, n))
        }
    }
}

/// Fraction of EEG positions hidden once natural and training masks combine.
pub fn overall_mask_ratio(nmr: f64, train_ratio: f64) -> Result<f64> {
    check_ratio(nmr)?;
    check_ratio(train_ratio)?;
    Ok(nmr + (1.0 - nmr) * train_ratio)
}

/// Replaces flagged rows of `embeddings` with the shared trainable `mask_vector`.
pub fn apply_mask_replacements(
    g: &mut Graph,
    embeddings: Var,
    flags: &[bool],
    mask_vector: Var,
) -> Result<Var> {
    g.replace_rows(embeddings, flags, mask_vector)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BOS, EOS, PAD};
    use crate::nn::ParamStore;
    use crate::tensor::{finite_difference_check, Tensor};

    #[test]
    fn text_mask_counts() {
        let ids = [BOS, 5, 6, 7, 8, 9, 10, 11, 12, EOS, PAD];
        let f = mask_text(&ids, 0.75, 3).unwrap();
        assert_eq!(f.iter().filter(|&&x| x).count(), 6);
        assert!(!f[0] && !f[9] && !f[10]);
        assert_eq!(f, mask_text(&ids, 0.75, 3).unwrap());
        let f = mask_text(&[5, 6, 7, 8, 9], 1e-6, 3).unwrap();
        assert_eq!(f.iter().filter(|&&x| x).count(), 1);
        assert!(mask_text(&ids, 1.5, 0).is_err());
    }

    #[test]
    fn text_mask_of_only_specials_is_degenerate() {
        let err = mask_text(&[BOS, PAD, EOS, PAD], 0.75, 0).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn eeg_forced_and_random_all() {
        let natural = [false, false, false, false, false];
        let f = mask_eeg(&natural, 0.75, EegMaskStrategy::ForcedSentence, 1).unwrap();
        assert!(f[4]);
        assert_eq!(f[..4].iter().filter(|&&x| x).count(), 3);

        let f = mask_eeg(&natural, 0.0, EegMaskStrategy::ForcedSentence, 1).unwrap();
        assert_eq!(f, vec![false, false, false, false, true]);

        let f = mask_eeg(&natural, 0.75, EegMaskStrategy::RandomAll, 1).unwrap();
        assert_eq!(f.iter().filter(|&&x| x).count(), 4);
        let sentence_skipped = (0..200)
            .any(|s| !mask_eeg(&natural, 0.75, EegMaskStrategy::RandomAll, s).unwrap()[4]);
        assert!(sentence_skipped);
    }

    #[test]
    fn eeg_masks_skip_natural_and_reject_degenerate() {
        let natural = [true, false, true, false, false];
        for s in 0..50 {
            let f = mask_eeg(&natural, 1.0, EegMaskStrategy::ForcedSentence, s).unwrap();
            assert!(!f[0] && !f[2]);
            assert_eq!(f, vec![false, true, false, true, true]);
        }
        let all_missing = [true, true, false];
        assert!(matches!(
            mask_eeg(&all_missing, 0.75, EegMaskStrategy::ForcedSentence, 0),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn overall_ratio() {
        assert!((overall_mask_ratio(0.3251, 0.75).unwrap() - 0.831275).abs() < 1e-12);
        assert_eq!(overall_mask_ratio(0.0, 0.4).unwrap(), 0.4);
        assert_eq!(overall_mask_ratio(1.0, 0.4).unwrap(), 1.0);
    }

    #[test]
    fn replacement_rows_and_gradient() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let xv = g.constant(x.clone());
        let m = g.constant(Tensor::new(vec![2], vec![-1.0, -2.0]).unwrap());
        let y = apply_mask_replacements(&mut g, xv, &[false; 3], m).unwrap();
        assert_eq!(g.value(y), &x);
        let y = apply_mask_replacements(&mut g, xv, &[true; 3], m).unwrap();
        assert_eq!(g.value(y).data(), &[-1.0, -2.0, -1.0, -2.0, -1.0, -2.0]);
        let wide = g.constant(Tensor::zeros(&[3]));
        assert!(apply_mask_replacements(&mut g, xv, &[true; 3], wide).is_err());

        // d(sum)/d(mask) equals the number of flagged rows.
        let flags = [true, false, true];
        let mask = Tensor::new(vec![2], vec![0.3, -0.7]).unwrap();
        let mut tape = crate::tensor::Tape::new();
        let xv = tape.constant(x.clone());
        let mv = tape.leaf(mask.clone());
        let y = tape.replace_rows(xv, &flags, mv).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(mv).unwrap().data(), &[2.0, 2.0]);
        let err = finite_difference_check(
            |t, mv| {
                let xv = t.constant(x.clone());
                let y = t.replace_rows(xv, &flags, mv)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            },
            &mask,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8);
    }
}
