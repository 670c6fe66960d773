//! Bit-exact load/save/validate of checkpoints in a single-file
//! header-plus-payload tensor container (`.mgt`).
//!
//! Layout: 8-byte little-endian header length, UTF-8 JSON header mapping
//! tensor name to `{dtype, shape, data_offsets}` plus a `__metadata__`
//! string map, then a contiguous little-endian f32 payload. Tensors are
//! stored sorted by name, the header is padded with spaces to an 8-byte
//! boundary, and no timestamps are written, so identical checkpoints
//! serialize to identical bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The only supported element type.
const DTYPE_F32: &str = "F32";
/// Header key reserved for checkpoint metadata.
const METADATA_KEY: &str = "__metadata__";
/// Metadata key prefix carrying a tensor's row labels as a JSON array.
const ROW_LABELS_PREFIX: &str = "row_labels:";

const RESERVED_META_KEYS: [&str; 6] = ["id", "domain", "phase", "paradigm", "lineage", "seed"];

/// One named tensor: row-major f32 values plus optional per-row labels
/// (used on embedding tables to identify vocabulary rows).
#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub row_labels: Option<Vec<String>>,
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name != METADATA_KEY
        && name
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'/' | b'-'))
}

impl TensorEntry {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let entry = TensorEntry {
            name: name.into(),
            shape,
            data,
            row_labels: None,
        };
        entry.validate()?;
        Ok(entry)
    }

    pub fn with_row_labels(mut self, labels: Vec<String>) -> Result<Self> {
        self.row_labels = Some(labels);
        self.validate()?;
        Ok(self)
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |reason: String| Error::InvalidTensor {
            name: self.name.clone(),
            reason,
        };
        if !valid_name(&self.name) {
            return Err(invalid("name must match [A-Za-z0-9._/-]+".into()));
        }
        if self.shape.contains(&0) {
            return Err(invalid(format!(
                "shape {:?} has a zero dimension",
                self.shape
            )));
        }
        if self.numel() != self.data.len() {
            return Err(invalid(format!(
                "shape {:?} implies {} elements, data has {}",
                self.shape,
                self.numel(),
                self.data.len()
            )));
        }
        if let Some(labels) = &self.row_labels {
            if self.shape.is_empty() || labels.len() != self.shape[0] {
                return Err(invalid(format!(
                    "row_labels length {} does not match shape[0] {:?}",
                    labels.len(),
                    self.shape.first()
                )));
            }
            let unique: BTreeSet<&String> = labels.iter().collect();
            if unique.len() != labels.len() {
                return Err(invalid("row_labels contain duplicates".into()));
            }
        }
        Ok(())
    }
}

/// An immutable named-tensor collection with grid metadata; the unit every
/// merge, sweep, and evaluation operates on.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub id: String,
    pub domain: Option<String>,
    pub phase: Option<String>,
    pub paradigm: Option<String>,
    /// Id of the checkpoint(s) this one was derived from.
    pub lineage: Option<String>,
    pub seed: Option<u64>,
    /// Auxiliary string metadata (e.g. model hyperparameters); round-trips
    /// through `__metadata__` untouched.
    pub extra: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>, // sorted by name, names unique
}

impl Checkpoint {
    pub fn new(id: impl Into<String>) -> Self {
        Checkpoint {
            id: id.into(),
            ..Default::default()
        }
    }

    /// Insert a tensor, keeping the collection sorted by name.
    pub fn insert(&mut self, entry: TensorEntry) -> Result<()> {
        entry.validate()?;
        match self
            .tensors
            .binary_search_by(|t| t.name.as_str().cmp(&entry.name))
        {
            Ok(_) => Err(Error::DuplicateTensor(entry.name)),
            Err(pos) => {
                self.tensors.insert(pos, entry);
                Ok(())
            }
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorEntry> {
        self.tensors
            .binary_search_by(|t| t.name.as_str().cmp(name))
            .ok()
            .map(|i| &self.tensors[i])
    }

    pub fn remove(&mut self, name: &str) -> Option<TensorEntry> {
        self.tensors
            .binary_search_by(|t| t.name.as_str().cmp(name))
            .ok()
            .map(|i| self.tensors.remove(i))
    }

    pub fn tensors(&self) -> &[TensorEntry] {
        &self.tensors
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|t| t.name.as_str())
    }

    pub fn validate(&self) -> Result<()> {
        for t in &self.tensors {
            t.validate()?;
        }
        for pair in self.tensors.windows(2) {
            if pair[0].name == pair[1].name {
                return Err(Error::DuplicateTensor(pair[0].name.clone()));
            }
        }
        Ok(())
    }

    /// Build a sibling checkpoint with the same tensor names/shapes/labels
    /// but new data produced by `f`.
    pub fn map_data(
        &self,
        id: impl Into<String>,
        mut f: impl FnMut(&TensorEntry) -> Vec<f32>,
    ) -> Checkpoint {
        let mut out = Checkpoint::new(id);
        for t in &self.tensors {
            let data = f(t);
            debug_assert_eq!(data.len(), t.numel());
            out.tensors.push(TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                data,
                row_labels: t.row_labels.clone(),
            });
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::Malformed {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Serialize a checkpoint to container bytes. Deterministic: identical
/// checkpoints yield identical bytes.
pub fn to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    ckpt.validate()?;

    let mut meta = BTreeMap::<String, String>::new();
    meta.insert("id".into(), ckpt.id.clone());
    if let Some(v) = &ckpt.domain {
        meta.insert("domain".into(), v.clone());
    }
    if let Some(v) = &ckpt.phase {
        meta.insert("phase".into(), v.clone());
    }
    if let Some(v) = &ckpt.paradigm {
        meta.insert("paradigm".into(), v.clone());
    }
    if let Some(v) = &ckpt.lineage {
        meta.insert("lineage".into(), v.clone());
    }
    if let Some(v) = ckpt.seed {
        meta.insert("seed".into(), v.to_string());
    }
    for (k, v) in &ckpt.extra {
        if RESERVED_META_KEYS.contains(&k.as_str()) || k.starts_with(ROW_LABELS_PREFIX) {
            return Err(Error::InvalidConfig(format!("reserved metadata key {k}")));
        }
        meta.insert(k.clone(), v.clone());
    }
    for t in ckpt.tensors() {
        if let Some(labels) = &t.row_labels {
            let encoded = serde_json::to_string(labels).expect("string list serializes");
            meta.insert(format!("{ROW_LABELS_PREFIX}{}", t.name), encoded);
        }
    }

    let mut header = BTreeMap::<String, serde_json::Value>::new();
    header.insert(
        METADATA_KEY.into(),
        serde_json::to_value(&meta).expect("string map serializes"),
    );
    let mut offset = 0usize;
    for t in ckpt.tensors() {
        let nbytes = t.numel() * 4;
        let entry = HeaderEntry {
            dtype: DTYPE_F32.into(),
            shape: t.shape.clone(),
            data_offsets: [offset, offset + nbytes],
        };
        header.insert(
            t.name.clone(),
            serde_json::to_value(&entry).expect("header entry serializes"),
        );
        offset += nbytes;
    }

    let mut header_bytes = serde_json::to_vec(&header).expect("header serializes");
    while !header_bytes.len().is_multiple_of(8) {
        header_bytes.push(b' ');
    }

    let mut out = Vec::with_capacity(8 + header_bytes.len() + offset);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for t in ckpt.tensors() {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Save a checkpoint to `path` (conventionally `.mgt`).
pub fn save(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(ckpt)?;
    std::fs::write(path, bytes).map_err(io_err(path))
}

/// Parse container bytes. `path` is used only in error messages.
pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    if bytes.len() < 8 {
        return Err(malformed(
            path,
            "file shorter than the 8-byte header length",
        ));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let payload_start = 8usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| {
            malformed(
                path,
                format!(
                    "header length {header_len} exceeds file size {}",
                    bytes.len()
                ),
            )
        })?;

    let header: BTreeMap<String, serde_json::Value> =
        serde_json::from_slice(&bytes[8..payload_start])
            .map_err(|e| malformed(path, format!("header is not valid JSON: {e}")))?;
    let payload = &bytes[payload_start..];

    let mut meta = BTreeMap::<String, String>::new();
    if let Some(value) = header.get(METADATA_KEY) {
        meta = serde_json::from_value(value.clone())
            .map_err(|e| malformed(path, format!("__metadata__ is not a string map: {e}")))?;
    }

    let mut row_labels = BTreeMap::<String, Vec<String>>::new();
    let mut extra = BTreeMap::<String, String>::new();
    for (k, v) in &meta {
        if let Some(tensor_name) = k.strip_prefix(ROW_LABELS_PREFIX) {
            let labels: Vec<String> = serde_json::from_str(v).map_err(|e| {
                malformed(
                    path,
                    format!("row labels for {tensor_name} are not a JSON string array: {e}"),
                )
            })?;
            row_labels.insert(tensor_name.to_string(), labels);
        } else if !RESERVED_META_KEYS.contains(&k.as_str()) {
            extra.insert(k.clone(), v.clone());
        }
    }

    let mut ckpt = Checkpoint {
        id: meta.get("id").cloned().unwrap_or_else(|| {
            path.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        }),
        domain: meta.get("domain").cloned(),
        phase: meta.get("phase").cloned(),
        paradigm: meta.get("paradigm").cloned(),
        lineage: meta.get("lineage").cloned(),
        seed: match meta.get("seed") {
            None => None,
            Some(s) => Some(
                s.parse::<u64>()
                    .map_err(|_| malformed(path, format!("seed metadata {s:?} is not a u64")))?,
            ),
        },
        extra,
        tensors: Vec::new(),
    };

    // BTreeMap iteration gives names in sorted order, matching storage order.
    let mut expected_offset = 0usize;
    for (name, value) in &header {
        if name == METADATA_KEY {
            continue;
        }
        let entry: HeaderEntry = serde_json::from_value(value.clone()).map_err(|e| {
            malformed(
                path,
                format!("header entry for tensor {name} is malformed: {e}"),
            )
        })?;
        let [begin, end] = entry.data_offsets;
        let file_offset = (payload_start + begin) as u64;
        if entry.dtype != DTYPE_F32 {
            return Err(Error::UnsupportedDtype {
                name: name.clone(),
                dtype: entry.dtype,
                offset: file_offset,
            });
        }
        if begin != expected_offset {
            return Err(malformed(
                path,
                format!("tensor {name} starts at payload offset {begin}, expected {expected_offset} (tensors must be contiguous in name order)"),
            ));
        }
        let numel: usize = entry.shape.iter().product();
        let available = payload.len().saturating_sub(begin);
        if end < begin || end - begin != numel * 4 || end > payload.len() {
            return Err(Error::PayloadMismatch {
                name: name.clone(),
                offset: file_offset,
                shape: entry.shape.clone(),
                expected: numel * 4,
                found: (end.saturating_sub(begin)).min(available),
            });
        }
        let data: Vec<f32> = payload[begin..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = TensorEntry {
            name: name.clone(),
            shape: entry.shape,
            data,
            row_labels: row_labels.remove(name),
        };
        tensor.validate()?;
        ckpt.tensors.push(tensor);
        expected_offset = end;
    }
    if expected_offset != payload.len() {
        return Err(malformed(
            path,
            format!(
                "payload has {} trailing bytes past the last tensor",
                payload.len() - expected_offset
            ),
        ));
    }
    if let Some(orphan) = row_labels.keys().next() {
        return Err(malformed(
            path,
            format!("row labels reference unknown tensor {orphan}"),
        ));
    }

    ckpt.validate()?;
    Ok(ckpt)
}

/// Load a checkpoint from disk.
pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    from_bytes(&bytes, path)
}

/// Name-set comparison of two checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct KeyDiff {
    pub shared: BTreeSet<String>,
    pub only_a: BTreeSet<String>,
    pub only_b: BTreeSet<String>,
    /// Shared names whose shapes differ.
    pub shape_mismatch: BTreeSet<String>,
}

pub fn diff_keys(a: &Checkpoint, b: &Checkpoint) -> KeyDiff {
    let names_a: BTreeSet<String> = a.names().map(str::to_string).collect();
    let names_b: BTreeSet<String> = b.names().map(str::to_string).collect();
    let shared: BTreeSet<String> = names_a.intersection(&names_b).cloned().collect();
    let shape_mismatch = shared
        .iter()
        .filter(|n| a.tensor(n).unwrap().shape != b.tensor(n).unwrap().shape)
        .cloned()
        .collect();
    KeyDiff {
        only_a: names_a.difference(&names_b).cloned().collect(),
        only_b: names_b.difference(&names_a).cloned().collect(),
        shared,
        shape_mismatch,
    }
}

/// JSON description of a checkpoint for `mergegrid inspect`.
pub fn inspect_json(ckpt: &Checkpoint) -> serde_json::Value {
    let tensors: Vec<serde_json::Value> = ckpt
        .tensors()
        .iter()
        .map(|t| {
            serde_json::json!({
                "name": t.name,
                "dtype": DTYPE_F32,
                "shape": t.shape,
                "numel": t.numel(),
                "row_labels": t.row_labels.as_ref().map(|l| l.len()),
            })
        })
        .collect();
    serde_json::json!({
        "id": ckpt.id,
        "domain": ckpt.domain,
        "phase": ckpt.phase,
        "paradigm": ckpt.paradigm,
        "lineage": ckpt.lineage,
        "seed": ckpt.seed,
        "extra": ckpt.extra,
        "tensors": tensors,
    })
}
