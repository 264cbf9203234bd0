use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// 8:1:1 within each subject.
    PerSubject,
    /// One fold per subject, that subject's data held out as test.
    LeaveOneSubjectOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub mode: SplitMode,
    pub seed: u64,
}

/// Indices into a dataset. `fold` names the held-out subject under LOSO.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub fold: Option<String>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// One partition for [`SplitMode::PerSubject`], one per subject for LOSO.
///
/// Per-subject counts are floored: `val = test = ⌊n/10⌋`, the rest trains.
pub fn make_split(dataset: &Dataset, plan: &SplitPlan) -> Result<Vec<Partition>> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("dataset"));
    }
    let subjects = dataset.subjects();
    let by_subject: Vec<Vec<usize>> = subjects
        .iter()
        .map(|s| {
            dataset
                .pairs
                .iter()
                .enumerate()
                .filter(|(_, p)| &p.eeg.subject_id == s)
                .map(|(i, _)| i)
                .collect()
        })
        .collect();
    match plan.mode {
        SplitMode::PerSubject => {
            let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
            let mut part = Partition {
                fold: None,
                train: vec![],
                val: vec![],
                test: vec![],
            };
            for (subject, idx) in subjects.iter().zip(by_subject) {
                if idx.len() < 10 {
                    return Err(Error::Config(format!(
                        "subject {subject} has {} sentences; 8:1:1 needs at least 10",
                        idx.len()
                    )));
                }
                let mut idx = idx;
                idx.shuffle(&mut rng);
                let tenth = idx.len() / 10;
                part.val.extend_from_slice(&idx[..tenth]);
                part.test.extend_from_slice(&idx[tenth..2 * tenth]);
                part.train.extend_from_slice(&idx[2 * tenth..]);
            }
            for v in [&mut part.train, &mut part.val, &mut part.test] {
                v.sort_unstable();
            }
            Ok(vec![part])
        }
        SplitMode::LeaveOneSubjectOut => {
            if subjects.len() < 2 {
                return Err(Error::Config(format!(
                    "leave-one-subject-out needs at least 2 subjects, found {}",
                    subjects.len()
                )));
            }
            Ok(subjects
                .iter()
                .zip(&by_subject)
                .map(|(s, test)| Partition {
                    fold: Some(s.clone()),
                    train: (0..dataset.len()).filter(|i| !test.contains(i)).collect(),
                    val: vec![],
                    test: test.clone(),
                })
                .collect())
        }
    }
}
