//! Checkpoint files: an 8-byte magic, a little-endian u64 header length, a
//! JSON header indexing every tensor, then the raw little-endian payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"E2TCKPT\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub nbytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    /// What produced the file, e.g. `"cetmae"` or `"text_encoder"`.
    pub kind: String,
    pub config: serde_json::Value,
    #[serde(default)]
    pub vocab: Option<Vec<String>>,
    #[serde(default)]
    pub frozen: Vec<String>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.header
            .tensors
            .iter()
            .position(|e| e.name == name)
            .map(|i| &self.tensors[i])
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.header.tensors.iter().map(|e| e.name.as_str())
    }

    /// Deserializes the stored run configuration.
    pub fn config<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.header.config.clone())
            .map_err(|e| Error::Transfer(format!("checkpoint config: {e}")))
    }

    /// An in-memory snapshot of `store`.
    pub fn from_store(
        store: &ParamStore,
        kind: &str,
        config: serde_json::Value,
        vocab: Option<Vec<String>>,
    ) -> Self {
        let mut tensors = Vec::with_capacity(store.len());
        let mut entries = Vec::with_capacity(store.len());
        let mut frozen = Vec::new();
        let mut offset = 0;
        for id in store.ids() {
            let t = store.get(id);
            let nbytes = t.numel() * Dtype::F64.width();
            entries.push(TensorEntry {
                name: store.name(id).to_string(),
                dtype: Dtype::F64,
                shape: t.shape().to_vec(),
                offset,
                nbytes,
            });
            offset += nbytes;
            tensors.push(t.clone());
            if store.is_frozen(id) {
                frozen.push(store.name(id).to_string());
            }
        }
        Self {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                kind: kind.to_string(),
                config,
                vocab,
                frozen,
                tensors: entries,
            },
            tensors,
        }
    }

    pub fn write(&self, path: &Path, dtype: Dtype) -> Result<()> {
        let mut payload = Vec::new();
        let mut header = self.header.clone();
        for (e, t) in header.tensors.iter_mut().zip(&self.tensors) {
            e.offset = payload.len();
            e.dtype = dtype;
            for &v in t.data() {
                match dtype {
                    Dtype::F64 => payload.extend_from_slice(&v.to_le_bytes()),
                    Dtype::F32 => payload.extend_from_slice(&(v as f32).to_le_bytes()),
                }
            }
            e.nbytes = payload.len() - e.offset;
        }
        let json = serde_json::to_vec(&header).expect("serializable header");
        let mut buf = Vec::with_capacity(16 + json.len() + payload.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        buf.extend_from_slice(&payload);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

/// Writes every parameter of `store`. Frozen flags are recorded by name.
pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    kind: &str,
    config: serde_json::Value,
    vocab: Option<Vec<String>>,
    dtype: Dtype,
) -> Result<()> {
    if store.is_shape_only() {
        return Err(Error::Contract("cannot save a shape-only parameter store".into()));
    }
    Checkpoint::from_store(store, kind, config, vocab).write(path, dtype)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::Transfer(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[16..body]).map_err(|e| bad(e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {}", header.format_version)));
    }
    let payload = &bytes[body..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let numel: usize = e.shape.iter().product();
        if e.nbytes != numel * e.dtype.width() || e.offset + e.nbytes > payload.len() {
            return Err(bad(format!("tensor {} has inconsistent extent", e.name)));
        }
        let raw = &payload[e.offset..e.offset + e.nbytes];
        let data: Vec<f64> = match e.dtype {
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
        };
        tensors.push(Tensor::new(e.shape.clone(), data).map_err(|err| bad(err.to_string()))?);
    }
    Ok(Checkpoint { header, tensors })
}

/// `"*"` selects everything, `"prefix.*"` a module subtree, anything else an
/// exact name.
pub fn name_matches(filter: &str, name: &str) -> bool {
    if filter == "*" {
        true
    } else if let Some(prefix) = filter.strip_suffix('*') {
        name.starts_with(prefix)
    } else {
        name == filter
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    /// Target parameters overwritten from the checkpoint.
    pub loaded: Vec<String>,
    /// Checkpoint tensors that were not loaded.
    pub unmatched: Vec<String>,
}

/// Copies every target parameter selected by `filters` from `ckpt`. All
/// selected names must exist with identical shapes, otherwise nothing is
/// written and a transfer error lists the offenders.
pub fn load_partial(
    store: &mut ParamStore,
    ckpt: &Checkpoint,
    filters: &[&str],
) -> Result<TransferReport> {
    let selected: Vec<_> = store
        .ids()
        .filter(|&id| filters.iter().any(|f| name_matches(f, store.name(id))))
        .collect();
    if selected.is_empty() {
        return Err(Error::Transfer(format!(
            "filters {filters:?} select no target parameters"
        )));
    }
    let mut problems = Vec::new();
    for &id in &selected {
        let name = store.name(id);
        match ckpt.get(name) {
            None => problems.push(format!("{name}: missing from checkpoint")),
            Some(t) if t.shape() != store.shape(id) => problems.push(format!(
                "{name}: checkpoint shape {:?}, target {:?}",
                t.shape(),
                store.shape(id)
            )),
            Some(_) => {}
        }
    }
    if !problems.is_empty() {
        let shown = problems.iter().take(5).cloned().collect::<Vec<_>>().join("; ");
        return Err(Error::Transfer(format!(
            "{} incompatible parameters: {shown}",
            problems.len()
        )));
    }
    let mut report = TransferReport::default();
    for &id in &selected {
        let name = store.name(id).to_string();
        let t = ckpt.get(&name).expect("checked above").clone();
        store.set(id, t)?;
        report.loaded.push(name);
    }
    report.unmatched = ckpt
        .names()
        .filter(|n| !report.loaded.iter().any(|l| l == n))
        .map(str::to_string)
        .collect();
    Ok(report)
}
