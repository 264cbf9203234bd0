//! Sentence-level BLEU-N and ROUGE-1, averaged into per-group reports.
//!
//! Zero clipped n-gram matches are smoothed by substituting
//! `1 / (2 · max(1, candidate n-gram count))` for the precision.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped n-gram precision as `(matches, candidate n-grams)`.
fn modified_precision<T: Eq + Hash>(hyp: &[T], refs: &[&[T]], n: usize) -> (usize, usize) {
    let cand = ngram_counts(hyp, n);
    let mut max_ref: HashMap<&[T], usize> = HashMap::new();
    for r in refs {
        for (g, c) in ngram_counts(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let matches = cand
        .iter()
        .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
        .sum();
    (matches, hyp.len().saturating_sub(n - 1))
}

/// Sentence BLEU with uniform weights over 1..=n and brevity penalty
/// `min(1, exp(1 - r/c))`, where `r` is the reference length closest to `c`.
pub fn bleu_n<T: Eq + Hash>(hyp: &[T], refs: &[&[T]], n: usize) -> f64 {
    assert!((1..=4).contains(&n), "BLEU order must be 1..=4");
    assert!(!refs.is_empty(), "at least one reference");
    if hyp.is_empty() {
        return 0.0;
    }
    let c = hyp.len();
    let r = refs
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| (len.abs_diff(c), len))
        .expect("non-empty refs");
    let mut log_sum = 0.0;
    for k in 1..=n {
        let (m, total) = modified_precision(hyp, refs, k);
        let p = if m == 0 {
            1.0 / (2.0 * total.max(1) as f64)
        } else {
            m as f64 / total as f64
        };
        log_sum += p.ln() / n as f64;
    }
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * log_sum.exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rouge1 {
    pub p: f64,
    pub r: f64,
    pub f: f64,
}

pub fn rouge1<T: Eq + Hash>(hyp: &[T], reference: &[T]) -> Rouge1 {
    let h = ngram_counts(hyp, 1);
    let rc = ngram_counts(reference, 1);
    let overlap: usize = h
        .iter()
        .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
        .sum();
    let ratio = |den: usize| if den == 0 { 0.0 } else { overlap as f64 / den as f64 };
    let (p, r) = (ratio(hyp.len()), ratio(reference.len()));
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    Rouge1 { p, r, f }
}

/// Scores of one decoded sentence against its reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceScore {
    pub subject_id: String,
    pub fold: Option<String>,
    pub bleu: [f64; 4],
    pub rouge1: Rouge1,
}

impl SentenceScore {
    pub fn compute<T: Eq + Hash>(
        hyp: &[T],
        reference: &[T],
        subject_id: &str,
        fold: Option<&str>,
    ) -> Self {
        let refs = [reference];
        Self {
            subject_id: subject_id.to_string(),
            fold: fold.map(str::to_string),
            bleu: [1, 2, 3, 4].map(|n| bleu_n(hyp, &refs, n)),
            rouge1: rouge1(hyp, reference),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    Overall,
    Subject,
    Fold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub group: String,
    pub bleu: [f64; 4],
    pub rouge1_p: f64,
    pub rouge1_r: f64,
    pub rouge1_f: f64,
    pub n_sentences: usize,
}

fn mean_report(group: String, scores: &[&SentenceScore]) -> ScoreReport {
    let n = scores.len() as f64;
    let mut bleu = [0.0; 4];
    let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
    for s in scores {
        for (acc, v) in bleu.iter_mut().zip(s.bleu) {
            *acc += v;
        }
        p += s.rouge1.p;
        r += s.rouge1.r;
        f += s.rouge1.f;
    }
    ScoreReport {
        group,
        bleu: bleu.map(|b| b / n),
        rouge1_p: p / n,
        rouge1_r: r / n,
        rouge1_f: f / n,
        n_sentences: scores.len(),
    }
}

/// Arithmetic means of sentence scores per group, groups in order of first
/// appearance.
pub fn aggregate(results: &[SentenceScore], grouping: Grouping) -> Result<Vec<ScoreReport>> {
    if results.is_empty() {
        return Err(Error::EmptyInput("no scored sentences"));
    }
    if grouping == Grouping::Overall {
        let all: Vec<&SentenceScore> = results.iter().collect();
        return Ok(vec![mean_report("overall".into(), &all)]);
    }
    let key = |s: &SentenceScore| -> String {
        match grouping {
            Grouping::Subject => s.subject_id.clone(),
            _ => s.fold.clone().unwrap_or_else(|| "none".into()),
        }
    };
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<&SentenceScore>> = HashMap::new();
    for s in results {
        let k = key(s);
        if !groups.contains_key(&k) {
            order.push(k.clone());
        }
        groups.entry(k).or_default().push(s);
    }
    Ok(order
        .into_iter()
        .map(|k| {
            let g = &groups[&k];
            mean_report(k, g)
        })
        .collect())
}

pub const REPORT_HEADER: &str = "group,bleu1,bleu2,bleu3,bleu4,rouge1_p,rouge1_r,rouge1_f,n";

pub fn reports_to_csv(reports: &[ScoreReport]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in reports {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            r.group,
            r.bleu[0],
            r.bleu[1],
            r.bleu[2],
            r.bleu[3],
            r.rouge1_p,
            r.rouge1_r,
            r.rouge1_f,
            r.n_sentences
        );
    }
    out
}
