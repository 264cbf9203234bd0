use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, EegSequence, EegTextPair, Vocabulary};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"EEGF";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub sentence_id: String,
    pub subject_id: String,
    pub tokens: Vec<String>,
    /// Relative to the manifest's directory.
    pub feature_file: String,
    pub present_flags: Vec<u8>,
}

/// Little-endian: `"EEGF"`, u32 version, u32 rows, u32 dim, then `rows × dim` f32.
pub fn write_feature_file(path: &Path, rows: usize, dim: usize, data: &[f32]) -> Result<()> {
    assert_eq!(rows * dim, data.len());
    let mut buf = Vec::with_capacity(HEADER_LEN + data.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(rows as u32).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Returns `(rows, dim, values)`.
pub fn read_feature_file(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Data(format!("{}: {m}", path.display()));
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(bad("missing EEGF header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let (rows, dim) = (word(8) as usize, word(12) as usize);
    if bytes.len() != HEADER_LEN + rows * dim * 4 {
        return Err(bad("payload length does not match header"));
    }
    let values = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((rows, dim, values))
}

fn feature_rel_path(pair: &EegTextPair) -> String {
    format!(
        "features/{}/{}.eegf",
        pair.eeg.subject_id, pair.eeg.sentence_id
    )
}

/// Writes `manifest.jsonl`, `vocab.txt` and one feature file per pair under
/// `dir`; returns the manifest path. Naturally missing rows are stored as zeros.
pub fn write_dataset(dir: &Path, dataset: &Dataset, vocab: &Vocabulary) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut manifest = Vec::new();
    for pair in &dataset.pairs {
        pair.validate(dataset.feature_dim)?;
        let rel = feature_rel_path(pair);
        let dim = dataset.feature_dim;
        let mut data = Vec::with_capacity((pair.tokens.len() + 1) * dim);
        for w in &pair.eeg.word_features {
            match w {
                Some(f) => data.extend_from_slice(f),
                None => data.extend(std::iter::repeat_n(0.0f32, dim)),
            }
        }
        data.extend_from_slice(&pair.eeg.sentence_feature);
        write_feature_file(&dir.join(&rel), pair.tokens.len() + 1, dim, &data)?;
        let rec = ManifestRecord {
            sentence_id: pair.eeg.sentence_id.clone(),
            subject_id: pair.eeg.subject_id.clone(),
            tokens: pair.tokens.clone(),
            feature_file: rel,
            present_flags: pair.eeg.present_flags().iter().map(|&p| p as u8).collect(),
        };
        serde_json::to_writer(&mut manifest, &rec).expect("serializable record");
        manifest.push(b'\n');
    }
    fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
    let vocab_path = dir.join(VOCAB_FILE);
    let mut f = fs::File::create(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?;
    for t in vocab.content_tokens() {
        writeln!(f, "{t}").map_err(|e| Error::io(&vocab_path, e))?;
    }
    Ok(manifest_path)
}

/// Parses a manifest and its feature files. The vocabulary comes from a
/// sibling `vocab.txt` when present, otherwise from tokens in order of first
/// appearance.
pub fn load_manifest(path: &Path, feature_dim: Option<usize>) -> Result<(Dataset, Vocabulary)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut pairs = Vec::new();
    let mut dim = feature_dim;
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |m: String| Error::Data(format!("{}:{}: {m}", path.display(), lineno + 1));
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| at(e.to_string()))?;
        if rec.tokens.is_empty() {
            return Err(at("empty sentence".into()));
        }
        if rec.present_flags.len() != rec.tokens.len() {
            return Err(at(format!(
                "{} present flags for {} tokens",
                rec.present_flags.len(),
                rec.tokens.len()
            )));
        }
        if rec.present_flags.iter().any(|&f| f > 1) {
            return Err(at("present flags must be 0 or 1".into()));
        }
        let fpath = base.join(&rec.feature_file);
        if !fpath.exists() {
            return Err(at(format!("missing feature file {}", fpath.display())));
        }
        let (rows, d, values) = read_feature_file(&fpath)?;
        if rows != rec.tokens.len() + 1 {
            return Err(at(format!(
                "{rows} feature rows for {} tokens (expected N+1)",
                rec.tokens.len()
            )));
        }
        match dim {
            Some(expected) if expected != d => {
                return Err(at(format!("feature dim {d}, configured {expected}")));
            }
            _ => dim = Some(d),
        }
        let row = |i: usize| values[i * d..(i + 1) * d].to_vec();
        pairs.push(EegTextPair {
            eeg: EegSequence {
                word_features: rec
                    .present_flags
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| (p == 1).then(|| row(i)))
                    .collect(),
                sentence_feature: row(rows - 1),
                subject_id: rec.subject_id,
                sentence_id: rec.sentence_id,
            },
            tokens: rec.tokens,
        });
    }
    if pairs.is_empty() {
        return Err(Error::EmptyInput("manifest"));
    }
    let vocab_path = base.join(VOCAB_FILE);
    let vocab = if vocab_path.exists() {
        let text = fs::read_to_string(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?;
        let v = Vocabulary::from_tokens(text.lines().filter(|l| !l.is_empty()))?;
        for p in &pairs {
            if let Some(t) = p.tokens.iter().find(|t| v.id(t) == super::UNK) {
                return Err(Error::Data(format!(
                    "{}: token {t:?} missing from {}",
                    p.eeg.sentence_id,
                    vocab_path.display()
                )));
            }
        }
        v
    } else {
        let mut v = Vocabulary::new();
        for t in pairs.iter().flat_map(|p| &p.tokens) {
            v.insert(t);
        }
        v
    };
    Ok((
        Dataset {
            feature_dim: dim.expect("at least one record"),
            pairs,
        },
        vocab,
    ))
}
