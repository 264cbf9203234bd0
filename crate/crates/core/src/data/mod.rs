//! Sentence-level EEG/text pairs: the data model, the on-disk format, a
//! synthetic generator, natural-missing statistics and dataset splits.

mod io;
mod split;
mod synthetic;
mod vocab;

pub use io::{load_manifest, read_feature_file, write_dataset, write_feature_file, ManifestRecord};
pub use split::{make_split, Partition, SplitMode, SplitPlan};
pub use synthetic::{generate_synthetic, SyntheticConfig};
pub use vocab::{Vocabulary, BOS, EOS, MASK, PAD, UNK};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Feature width of the band-power vectors the models were designed around.
pub const FULL_FEATURE_DIM: usize = 840;

/// Word-level EEG vectors (absent where no fixation was recorded) plus one
/// sentence-level vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EegSequence {
    pub word_features: Vec<Option<Vec<f32>>>,
    pub sentence_feature: Vec<f32>,
    pub subject_id: String,
    pub sentence_id: String,
}

impl EegSequence {
    pub fn len_words(&self) -> usize {
        self.word_features.len()
    }

    pub fn present_words(&self) -> usize {
        self.word_features.iter().filter(|w| w.is_some()).count()
    }

    pub fn present_flags(&self) -> Vec<bool> {
        self.word_features.iter().map(Option::is_some).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EegTextPair {
    pub eeg: EegSequence,
    pub tokens: Vec<String>,
}

impl EegTextPair {
    pub fn validate(&self, feature_dim: usize) -> Result<()> {
        let id = &self.eeg.sentence_id;
        if self.tokens.is_empty() {
            return Err(Error::Data(format!("{id}: empty sentence")));
        }
        if self.tokens.len() != self.eeg.word_features.len() {
            return Err(Error::Data(format!(
                "{id}: {} tokens but {} word features",
                self.tokens.len(),
                self.eeg.word_features.len()
            )));
        }
        let bad_dim = self
            .eeg
            .word_features
            .iter()
            .flatten()
            .chain(std::iter::once(&self.eeg.sentence_feature))
            .any(|f| f.len() != feature_dim);
        if bad_dim {
            return Err(Error::Data(format!(
                "{id}: feature width differs from configured {feature_dim}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub feature_dim: usize,
    pub pairs: Vec<EegTextPair>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            feature_dim: self.feature_dim,
            pairs: idx.iter().map(|&i| self.pairs[i].clone()).collect(),
        }
    }

    /// Subject ids in order of first appearance.
    pub fn subjects(&self) -> Vec<String> {
        let mut seen = Vec::<String>::new();
        for p in &self.pairs {
            if !seen.contains(&p.eeg.subject_id) {
                seen.push(p.eeg.subject_id.clone());
            }
        }
        seen
    }
}

/// The ordered feature tokens `[word_1 .. word_N, sentence]` of one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSequence {
    /// `(N+1) × feature_dim`; naturally missing words are zero rows.
    pub features: Tensor,
    /// `true` at naturally missing word positions; the last entry is always `false`.
    pub natural: Vec<bool>,
}

impl InputSequence {
    pub fn len(&self) -> usize {
        self.natural.len()
    }

    pub fn is_empty(&self) -> bool {
        self.natural.is_empty()
    }
}

pub fn build_input_sequence(pair: &EegTextPair) -> InputSequence {
    let eeg = &pair.eeg;
    let dim = eeg.sentence_feature.len();
    let n = eeg.word_features.len();
    let mut data = Vec::with_capacity((n + 1) * dim);
    let mut natural = Vec::with_capacity(n + 1);
    for w in &eeg.word_features {
        match w {
            Some(f) => {
                data.extend(f.iter().map(|&v| v as f64));
                natural.push(false);
            }
            None => {
                data.extend(std::iter::repeat_n(0.0, dim));
                natural.push(true);
            }
        }
    }
    data.extend(eeg.sentence_feature.iter().map(|&v| v as f64));
    natural.push(false);
    InputSequence {
        features: Tensor::new(vec![n + 1, dim], data).expect("validated pair"),
        natural,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub missing_pairs: u64,
    pub total_word_tokens: u64,
    pub nmr: f64,
}

impl DatasetStats {
    pub fn from_counts(missing_pairs: u64, total_word_tokens: u64) -> Result<Self> {
        if total_word_tokens == 0 {
            return Err(Error::EmptyInput("no word tokens"));
        }
        if missing_pairs > total_word_tokens {
            return Err(Error::Data(format!(
                "{missing_pairs} missing exceeds {total_word_tokens} total"
            )));
        }
        Ok(Self {
            missing_pairs,
            total_word_tokens,
            nmr: missing_pairs as f64 / total_word_tokens as f64,
        })
    }

    /// Stats of the union of two disjoint datasets.
    pub fn combine(&self, other: &DatasetStats) -> Result<Self> {
        Self::from_counts(
            self.missing_pairs + other.missing_pairs,
            self.total_word_tokens + other.total_word_tokens,
        )
    }
}

/// Natural masking ratio: missing word-level entries over all word tokens.
pub fn compute_nmr(dataset: &Dataset) -> Result<DatasetStats> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("dataset"));
    }
    let (missing, total) = dataset.pairs.iter().fold((0u64, 0u64), |(m, t), p| {
        let n = p.eeg.len_words() as u64;
        (m + n - p.eeg.present_words() as u64, t + n)
    });
    DatasetStats::from_counts(missing, total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(present: &[bool]) -> EegTextPair {
        EegTextPair {
            eeg: EegSequence {
                word_features: present
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| p.then(|| vec![i as f32 + 1.0; 3]))
                    .collect(),
                sentence_feature: vec![9.0; 3],
                subject_id: "S".into(),
                sentence_id: "x".into(),
            },
            tokens: present.iter().map(|_| "w".to_string()).collect(),
        }
    }

    #[test]
    fn input_sequence_puts_sentence_last() {
        let s = build_input_sequence(&pair(&[true, true, true]));
        assert_eq!(s.len(), 4);
        assert_eq!(s.features.row(3), &[9.0, 9.0, 9.0]);
        assert_eq!(s.features.row(1), &[2.0, 2.0, 2.0]);
        assert_eq!(s.natural, vec![false; 4]);
    }

    #[test]
    fn all_missing_words_flag_every_word_position() {
        let s = build_input_sequence(&pair(&[false, false]));
        assert_eq!(s.len(), 3);
        assert_eq!(s.natural, vec![true, true, false]);
        assert_eq!(s.features.row(0), &[0.0; 3]);
    }

    #[test]
    fn nmr_matches_published_counts() {
        for (m, t, pct) in [
            (90362, 277966, 32.51),
            (137460, 373817, 36.77),
            (204089, 515979, 39.55),
        ] {
            let s = DatasetStats::from_counts(m, t).unwrap();
            assert!((s.nmr * 100.0 - pct).abs() <= 0.005, "{m}/{t}");
        }
        assert_eq!(DatasetStats::from_counts(0, 10).unwrap().nmr, 0.0);
    }

    #[test]
    fn nmr_of_dataset_and_combination() {
        let a = Dataset {
            feature_dim: 3,
            pairs: vec![pair(&[true, false, true]), pair(&[false])],
        };
        let b = Dataset {
            feature_dim: 3,
            pairs: vec![pair(&[true, true])],
        };
        let sa = compute_nmr(&a).unwrap();
        assert_eq!((sa.missing_pairs, sa.total_word_tokens), (2, 4));
        let sb = compute_nmr(&b).unwrap();
        let mut ab = a.clone();
        ab.pairs.extend(b.pairs.clone());
        assert_eq!(compute_nmr(&ab).unwrap(), sa.combine(&sb).unwrap());
        let empty = Dataset { feature_dim: 3, pairs: vec![] };
        assert!(matches!(compute_nmr(&empty), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn validate_catches_misalignment() {
        let mut p = pair(&[true, true]);
        assert!(p.validate(3).is_ok());
        assert!(p.validate(4).is_err());
        p.tokens.pop();
        assert!(p.validate(3).is_err());
        p.tokens.clear();
        p.eeg.word_features.clear();
        assert!(p.validate(3).is_err());
    }
}
