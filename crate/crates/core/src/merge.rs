//! The merging algebra: task vectors, linear and subspace merging with TIES
//! and DARE trimming, alpha-rescaled pairwise merging, neutral-base
//! averaging, and vocabulary-union embedding merges.
//!
//! All sums accumulate in f64 and store f32. Operations are pure functions
//! of their inputs; per-tensor work may run concurrently and the outputs are
//! bit-identical for any degree of parallelism.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::counter_rng::{counter_uniform, tensor_key};
use crate::error::{Error, Result};
use crate::grid::BaseStrategy;
use crate::tensor_store::{Checkpoint, TensorEntry};

/// A delta between two shape-compatible checkpoints.
///
/// Tensor names skipped by the vocabulary-union path (embedding tables whose
/// shapes differ between base and target) are listed in `excluded`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    pub base_id: String,
    pub target_id: String,
    tensors: Vec<TensorEntry>, // sorted by name
    pub excluded: BTreeSet<String>,
}

impl TaskVector {
    pub fn tensor(&self, name: &str) -> Option<&TensorEntry> {
        self.tensors
            .binary_search_by(|t| t.name.as_str().cmp(name))
            .ok()
            .map(|i| &self.tensors[i])
    }

    pub fn tensors(&self) -> &[TensorEntry] {
        &self.tensors
    }

    /// Rebuild with new per-tensor data, preserving names/shapes/ids.
    pub fn map_data(&self, mut f: impl FnMut(&TensorEntry) -> Vec<f32>) -> TaskVector {
        TaskVector {
            base_id: self.base_id.clone(),
            target_id: self.target_id.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| {
                    let data = f(t);
                    debug_assert_eq!(data.len(), t.numel());
                    TensorEntry {
                        name: t.name.clone(),
                        shape: t.shape.clone(),
                        data,
                        row_labels: None,
                    }
                })
                .collect(),
            excluded: self.excluded.clone(),
        }
    }

    /// Test/fixture constructor from raw entries.
    pub fn from_entries(
        base_id: &str,
        target_id: &str,
        mut tensors: Vec<TensorEntry>,
    ) -> TaskVector {
        tensors.sort_by(|a, b| a.name.cmp(&b.name));
        TaskVector {
            base_id: base_id.into(),
            target_id: target_id.into(),
            tensors,
            excluded: BTreeSet::new(),
        }
    }
}

fn is_embedding(t: &TensorEntry) -> bool {
    t.row_labels.is_some()
}

/// Elementwise `target - base` per shared tensor.
///
/// Embedding tables (tensors carrying `row_labels`) are only subtracted when
/// their vocabularies agree row for row; tables that are missing from one
/// side, shape-incompatible, or differently labeled are excluded and
/// recorded rather than rejected, to be merged later by the
/// vocabulary-union path.
pub fn task_vector(base: &Checkpoint, target: &Checkpoint) -> Result<TaskVector> {
    let mut tensors = Vec::new();
    let mut excluded = BTreeSet::new();

    for t in target.tensors() {
        match base.tensor(&t.name) {
            Some(b) if b.shape == t.shape && b.row_labels == t.row_labels => {
                let data: Vec<f32> = t.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
                tensors.push(TensorEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data,
                    row_labels: None,
                });
            }
            Some(b) => {
                if is_embedding(t) && is_embedding(b) {
                    excluded.insert(t.name.clone());
                } else {
                    return Err(Error::ShapeMismatch {
                        name: t.name.clone(),
                        left: b.shape.clone(),
                        right: t.shape.clone(),
                    });
                }
            }
            None => {
                if is_embedding(t) {
                    excluded.insert(t.name.clone());
                } else {
                    return Err(Error::MissingTensor {
                        name: t.name.clone(),
                        ckpt: base.id.clone(),
                    });
                }
            }
        }
    }
    for b in base.tensors() {
        if target.tensor(&b.name).is_none() {
            if is_embedding(b) {
                excluded.insert(b.name.clone());
            } else {
                return Err(Error::MissingTensor {
                    name: b.name.clone(),
                    ckpt: target.id.clone(),
                });
            }
        }
    }

    Ok(TaskVector {
        base_id: base.id.clone(),
        target_id: target.id.clone(),
        tensors,
        excluded,
    })
}

fn expect_compatible(base: &Checkpoint, tv: &TaskVector) -> Result<()> {
    for t in tv.tensors() {
        match base.tensor(&t.name) {
            Some(b) if b.shape == t.shape => {}
            Some(b) => {
                return Err(Error::ShapeMismatch {
                    name: t.name.clone(),
                    left: b.shape.clone(),
                    right: t.shape.clone(),
                })
            }
            None => {
                return Err(Error::MissingTensor {
                    name: t.name.clone(),
                    ckpt: base.id.clone(),
                })
            }
        }
    }
    Ok(())
}

/// `base + scale * tv` per tensor. Tensors not covered by the task vector
/// pass through bit-exactly, as does the whole checkpoint when `scale == 0`.
pub fn apply(base: &Checkpoint, tv: &TaskVector, scale: f64) -> Result<Checkpoint> {
    expect_compatible(base, tv)?;
    let mut out = base.map_data(
        format!("apply({},{},{})", base.id, tv.target_id, scale),
        |t| match tv.tensor(&t.name) {
            Some(d) if scale != 0.0 => t
                .data
                .iter()
                .zip(&d.data)
                .map(|(&b, &v)| (f64::from(b) + scale * f64::from(v)) as f32)
                .collect(),
            _ => t.data.clone(),
        },
    );
    out.domain = base.domain.clone();
    out.phase = base.phase.clone();
    out.paradigm = base.paradigm.clone();
    out.lineage = Some(base.id.clone());
    out.extra = base.extra.clone();
    Ok(out)
}

/// Sum of absolute values per tensor and overall, accumulated in f64.
pub fn l1_norm(tv: &TaskVector) -> (BTreeMap<String, f64>, f64) {
    let mut per_tensor = BTreeMap::new();
    let mut total = 0.0f64;
    for t in tv.tensors() {
        let s: f64 = t.data.iter().map(|&v| f64::from(v).abs()).sum();
        total += s;
        per_tensor.insert(t.name.clone(), s);
    }
    (per_tensor, total)
}

fn merge_ids(tvs: &[TaskVector]) -> String {
    tvs.iter()
        .map(|tv| tv.target_id.as_str())
        .collect::<Vec<_>>()
        .join("+")
}

fn stamp_merge(out: &mut Checkpoint, method: &str, base_id: &str, inputs: String) {
    out.lineage = Some(inputs);
    out.extra.insert("merge_method".into(), method.into());
    out.extra.insert("base_id".into(), base_id.into());
}

/// `base + sum_n weights[n] * tvs[n]` per tensor.
///
/// Zero-weight terms are skipped entirely, so all-zero weights return the
/// base bit-exactly. Tensors untouched by every task vector pass through.
pub fn linear_merge(base: &Checkpoint, tvs: &[TaskVector], weights: &[f64]) -> Result<Checkpoint> {
    if tvs.is_empty() {
        return Err(Error::InvalidRecipe(
            "linear merge needs at least one task vector".into(),
        ));
    }
    if tvs.len() != weights.len() {
        return Err(Error::InvalidRecipe(format!(
            "{} task vectors but {} weights",
            tvs.len(),
            weights.len()
        )));
    }
    for tv in tvs {
        expect_compatible(base, tv)?;
    }
    let mut out = base.map_data(format!("linear({})", merge_ids(tvs)), |t| {
        let active: Vec<(&TensorEntry, f64)> = tvs
            .iter()
            .zip(weights)
            .filter(|(_, &w)| w != 0.0)
            .filter_map(|(tv, &w)| tv.tensor(&t.name).map(|d| (d, w)))
            .collect();
        if active.is_empty() {
            return t.data.clone();
        }
        let mut acc: Vec<f64> = t.data.iter().map(|&v| f64::from(v)).collect();
        for (d, w) in active {
            for (a, &v) in acc.iter_mut().zip(&d.data) {
                *a += w * f64::from(v);
            }
        }
        acc.into_iter().map(|v| v as f32).collect()
    });
    stamp_merge(&mut out, "linear", &base.id, merge_ids(tvs));
    Ok(out)
}

/// Keep the `ceil(X/100 * numel)` largest-magnitude entries per tensor and
/// zero the rest. Ties at the threshold keep the lower flat index.
pub fn ties_trim(tv: &TaskVector, keep_percent: f64) -> Result<TaskVector> {
    if !(keep_percent > 0.0 && keep_percent <= 100.0) {
        return Err(Error::InvalidRecipe(format!(
            "ties_keep_percent must be in (0, 100], got {keep_percent}"
        )));
    }
    Ok(tv.map_data(|t| {
        let numel = t.numel();
        let k = ((keep_percent / 100.0) * numel as f64).ceil() as usize;
        if k >= numel {
            return t.data.clone();
        }
        let mut order: Vec<usize> = (0..numel).collect();
        order
            .sort_unstable_by(|&i, &j| t.data[j].abs().total_cmp(&t.data[i].abs()).then(i.cmp(&j)));
        let mut out = vec![0.0f32; numel];
        for &i in &order[..k] {
            out[i] = t.data[i];
        }
        out
    }))
}

/// Per-coordinate elected sign across task vectors: the sign of
/// (summed positive magnitude - summed negative magnitude), with an exact
/// tie electing 0.
pub fn sign_elect(tvs: &[TaskVector]) -> Result<BTreeMap<String, Vec<i8>>> {
    let mut shapes: BTreeMap<&str, &[usize]> = BTreeMap::new();
    for tv in tvs {
        for t in tv.tensors() {
            match shapes.get(t.name.as_str()) {
                Some(&s) if s != t.shape.as_slice() => {
                    return Err(Error::ShapeMismatch {
                        name: t.name.clone(),
                        left: s.to_vec(),
                        right: t.shape.clone(),
                    })
                }
                _ => {
                    shapes.insert(&t.name, &t.shape);
                }
            }
        }
    }
    let mut elected = BTreeMap::new();
    for (name, shape) in shapes {
        let numel: usize = shape.iter().product();
        let mut pos = vec![0.0f64; numel];
        let mut neg = vec![0.0f64; numel];
        for tv in tvs {
            if let Some(t) = tv.tensor(name) {
                for (i, &v) in t.data.iter().enumerate() {
                    if v > 0.0 {
                        pos[i] += f64::from(v);
                    } else if v < 0.0 {
                        neg[i] += f64::from(-v);
                    }
                }
            }
        }
        let signs: Vec<i8> = pos
            .iter()
            .zip(&neg)
            .map(|(&p, &n)| {
                if p > n {
                    1
                } else if n > p {
                    -1
                } else {
                    0
                }
            })
            .collect();
        elected.insert(name.to_string(), signs);
    }
    Ok(elected)
}

/// Randomly zero each coordinate with probability `p` and rescale survivors
/// by `1/(1-p)`. The mask depends only on `(seed, tensor name, flat index)`,
/// so the output is bit-identical under any thread count.
pub fn dare_trim(tv: &TaskVector, drop_prob: f64, seed: u64) -> Result<TaskVector> {
    if !(0.0..1.0).contains(&drop_prob) {
        return Err(Error::InvalidRecipe(format!(
            "dare_drop_prob must be in [0, 1), got {drop_prob}"
        )));
    }
    if drop_prob == 0.0 {
        return Ok(tv.map_data(|t| t.data.clone()));
    }
    let rescale = 1.0 / (1.0 - drop_prob);
    Ok(tv.map_data(|t| {
        let key = tensor_key(seed, &t.name);
        let mut out = vec![0.0f32; t.numel()];
        out.par_chunks_mut(8192)
            .zip(t.data.par_chunks(8192))
            .enumerate()
            .for_each(|(chunk_idx, (dst, src))| {
                let start = chunk_idx as u64 * 8192;
                for (j, (d, &v)) in dst.iter_mut().zip(src).enumerate() {
                    if counter_uniform(key, start + j as u64) >= drop_prob {
                        *d = (f64::from(v) * rescale) as f32;
                    }
                }
            });
        out
    }))
}

/// How TIES magnitude trimming, DARE random dropping, sign election, and the
/// averaging rule compose inside a subspace or alpha merge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrimOrder {
    #[default]
    DareThenTies,
    TiesThenDare,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TrimConfig {
    /// TIES: keep the top X% of entries by magnitude, per tensor.
    #[serde(default)]
    pub ties_keep_percent: Option<f64>,
    /// TIES: zero coordinates whose sign disagrees with the elected sign.
    #[serde(default)]
    pub ties_sign_election: bool,
    /// DARE: drop probability p; survivors rescaled by 1/(1-p).
    #[serde(default)]
    pub dare_drop_prob: Option<f64>,
    /// Required when `dare_drop_prob` is set.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub order: TrimOrder,
    /// Average surviving values only (original TIES) instead of dividing
    /// by the full task-vector count.
    #[serde(default)]
    pub ties_disjoint_mean: bool,
}

impl TrimConfig {
    pub fn validate(&self, require_any: bool) -> Result<()> {
        if let Some(x) = self.ties_keep_percent {
            if !(x > 0.0 && x <= 100.0) {
                return Err(Error::InvalidRecipe(format!(
                    "ties_keep_percent {x} outside (0, 100]"
                )));
            }
        }
        if let Some(p) = self.dare_drop_prob {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::InvalidRecipe(format!(
                    "dare_drop_prob {p} outside [0, 1)"
                )));
            }
            if self.seed.is_none() {
                return Err(Error::InvalidRecipe(
                    "dare_drop_prob requires a seed".into(),
                ));
            }
        }
        if require_any && self.ties_keep_percent.is_none() && self.dare_drop_prob.is_none() {
            return Err(Error::InvalidRecipe(
                "subspace trim needs ties_keep_percent or dare_drop_prob".into(),
            ));
        }
        Ok(())
    }

    fn trim_one(&self, tv: &TaskVector) -> Result<TaskVector> {
        let dare = |tv: &TaskVector| -> Result<TaskVector> {
            match self.dare_drop_prob {
                Some(p) => dare_trim(tv, p, self.seed.expect("validated")),
                None => Ok(tv.clone()),
            }
        };
        let ties = |tv: &TaskVector| -> Result<TaskVector> {
            match self.ties_keep_percent {
                Some(x) => ties_trim(tv, x),
                None => Ok(tv.clone()),
            }
        };
        match self.order {
            TrimOrder::DareThenTies => ties(&dare(tv)?),
            TrimOrder::TiesThenDare => dare(&ties(tv)?),
        }
    }

    /// Trim every task vector, then apply sign election if configured.
    pub fn trim_all(&self, tvs: &[TaskVector]) -> Result<Vec<TaskVector>> {
        self.validate(false)?;
        let mut trimmed: Vec<TaskVector> = tvs
            .iter()
            .map(|tv| self.trim_one(tv))
            .collect::<Result<_>>()?;
        if self.ties_sign_election {
            let elected = sign_elect(&trimmed)?;
            trimmed = trimmed
                .iter()
                .map(|tv| {
                    tv.map_data(|t| {
                        let signs = &elected[&t.name];
                        t.data
                            .iter()
                            .zip(signs)
                            .map(|(&v, &s)| {
                                let keep = s != 0 && (v > 0.0) == (s > 0) && v != 0.0;
                                if keep {
                                    v
                                } else {
                                    0.0
                                }
                            })
                            .collect()
                    })
                })
                .collect();
        }
        Ok(trimmed)
    }
}

/// `base + (1/N) * sum_n Trim(tvs[n])` with trimming and sign election per
/// the config. With `ties_disjoint_mean` the divisor is the per-coordinate
/// survivor count instead of N.
pub fn subspace_merge(
    base: &Checkpoint,
    tvs: &[TaskVector],
    trim: &TrimConfig,
) -> Result<Checkpoint> {
    if tvs.is_empty() {
        return Err(Error::InvalidRecipe(
            "subspace merge needs at least one task vector".into(),
        ));
    }
    trim.validate(true)?;
    for tv in tvs {
        expect_compatible(base, tv)?;
    }
    let trimmed = trim.trim_all(tvs)?;
    let n = trimmed.len() as f64;
    let mut out = base.map_data(format!("subspace({})", merge_ids(tvs)), |t| {
        let parts: Vec<&TensorEntry> = trimmed.iter().filter_map(|tv| tv.tensor(&t.name)).collect();
        if parts.is_empty() {
            return t.data.clone();
        }
        let numel = t.numel();
        let mut sum = vec![0.0f64; numel];
        let mut live = vec![0u32; numel];
        for d in &parts {
            for (i, &v) in d.data.iter().enumerate() {
                sum[i] += f64::from(v);
                if v != 0.0 {
                    live[i] += 1;
                }
            }
        }
        t.data
            .iter()
            .enumerate()
            .map(|(i, &b)| {
                let divisor = if trim.ties_disjoint_mean {
                    f64::from(live[i])
                } else {
                    n
                };
                let mean = if divisor > 0.0 { sum[i] / divisor } else { 0.0 };
                (f64::from(b) + mean) as f32
            })
            .collect()
    });
    stamp_merge(&mut out, "subspace", &base.id, merge_ids(tvs));
    Ok(out)
}

/// `base + alpha * Trim(tv_i) + (1 - alpha) * Trim(tv_j)`.
pub fn alpha_merge(
    base: &Checkpoint,
    tv_i: &TaskVector,
    tv_j: &TaskVector,
    alpha: f64,
    trim: Option<&TrimConfig>,
) -> Result<Checkpoint> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidRecipe(format!(
            "alpha must be in [0, 1], got {alpha}"
        )));
    }
    expect_compatible(base, tv_i)?;
    expect_compatible(base, tv_j)?;
    let pair = [tv_i.clone(), tv_j.clone()];
    let trimmed = match trim {
        Some(cfg) => cfg.trim_all(&pair)?,
        None => pair.to_vec(),
    };
    let inputs = format!("{}+{}", tv_i.target_id, tv_j.target_id);
    let mut out = base.map_data(
        format!("alpha({},{},{})", tv_i.target_id, tv_j.target_id, alpha),
        |t| {
            let mut acc: Vec<f64> = t.data.iter().map(|&v| f64::from(v)).collect();
            for (tv, w) in trimmed.iter().zip([alpha, 1.0 - alpha]) {
                if w == 0.0 {
                    continue;
                }
                if let Some(d) = tv.tensor(&t.name) {
                    for (a, &v) in acc.iter_mut().zip(&d.data) {
                        *a += w * f64::from(v);
                    }
                }
            }
            acc.into_iter().map(|v| v as f32).collect()
        },
    );
    stamp_merge(&mut out, "alpha_pair", &base.id, inputs);
    out.extra.insert("alpha".into(), alpha.to_string());
    Ok(out)
}

/// Elementwise mean over checkpoints. Inputs are accumulated in a canonical
/// order (sorted by id), so any input permutation produces bit-identical
/// output. Pairwise embedding-shape mismatches are routed through the
/// vocabulary-union path with a mean over the shared rows.
pub fn average_merge(ckpts: &[&Checkpoint]) -> Result<Checkpoint> {
    if ckpts.is_empty() {
        return Err(Error::InvalidRecipe(
            "average merge needs at least one checkpoint".into(),
        ));
    }
    let mut ordered: Vec<&Checkpoint> = ckpts.to_vec();
    ordered.sort_by(|a, b| a.id.cmp(&b.id));
    let ids: Vec<&str> = ordered.iter().map(|c| c.id.as_str()).collect();

    let mut names = BTreeSet::new();
    for c in &ordered {
        names.extend(c.names().map(str::to_string));
    }

    let mut out = Checkpoint::new(format!("average({})", ids.join("+")));
    for name in &names {
        let holders: Vec<&TensorEntry> = ordered.iter().filter_map(|c| c.tensor(name)).collect();
        let mismatch = holders
            .iter()
            .any(|t| t.shape != holders[0].shape || t.row_labels != holders[0].row_labels);
        if mismatch {
            if holders.len() == 2 && holders.iter().all(|t| is_embedding(t)) {
                let merged = vocab_union_merge(
                    holders[0],
                    holders[1],
                    shared_label_prefix(holders[0], holders[1]),
                    mean_pair,
                )?;
                out.insert(merged)?;
                continue;
            }
            return Err(Error::ShapeMismatch {
                name: name.clone(),
                left: holders[0].shape.clone(),
                right: holders.last().unwrap().shape.clone(),
            });
        }
        let numel = holders[0].numel();
        let mut acc = vec![0.0f64; numel];
        for t in &holders {
            for (a, &v) in acc.iter_mut().zip(&t.data) {
                *a += f64::from(v);
            }
        }
        let count = holders.len() as f64;
        let data: Vec<f32> = acc.into_iter().map(|v| (v / count) as f32).collect();
        let mut entry = TensorEntry::new(name.clone(), holders[0].shape.clone(), data)?;
        entry.row_labels = holders[0].row_labels.clone();
        out.insert(entry)?;
    }
    out.lineage = Some(ids.join("+"));
    out.extra.insert("merge_method".into(), "average".into());
    Ok(out)
}

fn mean_pair(a: &[f32], b: &[f32]) -> Vec<f32> {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| ((f64::from(x) + f64::from(y)) / 2.0) as f32)
        .collect()
}

/// Length of the common row-label prefix of two embedding tables.
pub fn shared_label_prefix(a: &TensorEntry, b: &TensorEntry) -> usize {
    match (&a.row_labels, &b.row_labels) {
        (Some(la), Some(lb)) => la.iter().zip(lb).take_while(|(x, y)| x == y).count(),
        _ => 0,
    }
}

/// Merge two embedding tables with partially overlapping vocabularies.
///
/// The first `shared_rows` rows (the base vocabulary) are combined by
/// `merge_shared`; each input's expanded rows follow bit-exactly, first
/// `emb_i`'s then `emb_j`'s, in their original order.
pub fn vocab_union_merge<F>(
    emb_i: &TensorEntry,
    emb_j: &TensorEntry,
    shared_rows: usize,
    merge_shared: F,
) -> Result<TensorEntry>
where
    F: FnOnce(&[f32], &[f32]) -> Vec<f32>,
{
    let fail = |reason: String| Error::VocabUnion {
        name: emb_i.name.clone(),
        reason,
    };
    if emb_i.name != emb_j.name {
        return Err(fail(format!(
            "tensor names differ: {} vs {}",
            emb_i.name, emb_j.name
        )));
    }
    if emb_i.shape.len() != 2 || emb_j.shape.len() != 2 {
        return Err(fail("embedding tables must be 2-D".into()));
    }
    let cols = emb_i.shape[1];
    if emb_j.shape[1] != cols {
        return Err(fail(format!(
            "column counts differ: {} vs {}",
            cols, emb_j.shape[1]
        )));
    }
    let (Some(labels_i), Some(labels_j)) = (&emb_i.row_labels, &emb_j.row_labels) else {
        return Err(fail("both inputs need row_labels".into()));
    };
    if shared_rows > labels_i.len() || shared_rows > labels_j.len() {
        return Err(fail(format!(
            "shared_rows {shared_rows} exceeds an input's row count"
        )));
    }
    if labels_i[..shared_rows] != labels_j[..shared_rows] {
        return Err(fail("shared-prefix labels differ between inputs".into()));
    }
    let shared: BTreeSet<&String> = labels_i[..shared_rows].iter().collect();
    let expanded_i: BTreeSet<&String> = labels_i[shared_rows..].iter().collect();
    let expanded_j: BTreeSet<&String> = labels_j[shared_rows..].iter().collect();
    if let Some(dup) = expanded_i.intersection(&expanded_j).next() {
        return Err(fail(format!("expanded label {dup} appears in both inputs")));
    }
    if let Some(dup) = expanded_i.union(&expanded_j).find(|l| shared.contains(**l)) {
        return Err(fail(format!(
            "expanded label {dup} collides with the shared vocabulary"
        )));
    }

    let split = shared_rows * cols;
    let merged = if shared_rows > 0 {
        let block = merge_shared(&emb_i.data[..split], &emb_j.data[..split]);
        if block.len() != split {
            return Err(fail(format!(
                "shared merge produced {} values, expected {split}",
                block.len()
            )));
        }
        block
    } else {
        Vec::new()
    };

    let rows = shared_rows + (labels_i.len() - shared_rows) + (labels_j.len() - shared_rows);
    let mut data = Vec::with_capacity(rows * cols);
    data.extend_from_slice(&merged);
    data.extend_from_slice(&emb_i.data[split..]);
    data.extend_from_slice(&emb_j.data[shared_rows * cols..]);

    let mut labels = Vec::with_capacity(rows);
    labels.extend_from_slice(&labels_i[..shared_rows]);
    labels.extend_from_slice(&labels_i[shared_rows..]);
    labels.extend_from_slice(&labels_j[shared_rows..]);

    TensorEntry::new(emb_i.name.clone(), vec![rows, cols], data)?.with_row_labels(labels)
}

/// How one merge is described on disk: inputs, method, weights, trim
/// parameters, base strategy, output id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    Linear,
    Subspace,
    AlphaPair,
    Average,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeRecipe {
    pub method: MergeMethod,
    /// Checkpoint ids, resolved through the grid manifest.
    pub inputs: Vec<String>,
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub trim: Option<TrimConfig>,
    #[serde(default)]
    pub base: BaseStrategy,
    pub output_id: String,
    /// Drop the additive base term, leaving the bare weighted sum of task
    /// vectors.
    #[serde(default)]
    pub no_base_term: bool,
}

impl MergeRecipe {
    pub fn validate(&self) -> Result<()> {
        if self.inputs.is_empty() {
            return Err(Error::InvalidRecipe("recipe has no inputs".into()));
        }
        match self.method {
            MergeMethod::Linear => {
                let w = self
                    .weights
                    .as_ref()
                    .ok_or_else(|| Error::InvalidRecipe("linear merge needs weights".into()))?;
                if w.len() != self.inputs.len() {
                    return Err(Error::InvalidRecipe(format!(
                        "{} inputs but {} weights",
                        self.inputs.len(),
                        w.len()
                    )));
                }
            }
            MergeMethod::Subspace => {
                let trim = self.trim.as_ref().ok_or_else(|| {
                    Error::InvalidRecipe("subspace merge needs a trim config".into())
                })?;
                trim.validate(true)?;
            }
            MergeMethod::AlphaPair => {
                if self.inputs.len() != 2 {
                    return Err(Error::InvalidRecipe(format!(
                        "alpha_pair needs exactly 2 inputs, got {}",
                        self.inputs.len()
                    )));
                }
                let alpha = self
                    .alpha
                    .ok_or_else(|| Error::InvalidRecipe("alpha_pair needs alpha".into()))?;
                if !(0.0..=1.0).contains(&alpha) {
                    return Err(Error::InvalidRecipe(format!(
                        "alpha {alpha} outside [0, 1]"
                    )));
                }
                if let Some(trim) = &self.trim {
                    trim.validate(false)?;
                }
            }
            MergeMethod::Average => {}
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ckpt(id: &str, values: &[(&str, Vec<f32>)]) -> Checkpoint {
        let mut c = Checkpoint::new(id);
        for (name, data) in values {
            let n = data.len();
            c.insert(TensorEntry::new(*name, vec![n], data.clone()).unwrap())
                .unwrap();
        }
        c
    }

    fn tv(base: &Checkpoint, target: &Checkpoint) -> TaskVector {
        task_vector(base, target).unwrap()
    }

    #[test]
    fn task_vector_of_identical_checkpoints_is_zero() {
        let c = ckpt("c", &[("w", vec![1.0, -2.0, 3.0])]);
        let d = tv(&c, &c);
        assert!(d.tensor("w").unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn task_vector_elementwise_subtraction() {
        let b = ckpt("b", &[("w", vec![1.0, 2.0])]);
        let t = ckpt("t", &[("w", vec![4.0, 6.0])]);
        assert_eq!(tv(&b, &t).tensor("w").unwrap().data, vec![3.0, 4.0]);
    }

    #[test]
    fn task_vector_matches_scalar_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let bd: Vec<f32> = (0..9).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let td: Vec<f32> = (0..9).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let mut b = Checkpoint::new("b");
        b.insert(TensorEntry::new("m", vec![3, 3], bd.clone()).unwrap())
            .unwrap();
        let mut t = Checkpoint::new("t");
        t.insert(TensorEntry::new("m", vec![3, 3], td.clone()).unwrap())
            .unwrap();
        let got = tv(&b, &t);
        let oracle: Vec<f32> = (0..9).map(|i| td[i] - bd[i]).collect();
        assert_eq!(got.tensor("m").unwrap().data, oracle);
    }

    #[test]
    fn task_vector_shape_mismatch_is_error() {
        let mut b = Checkpoint::new("b");
        b.insert(TensorEntry::new("w", vec![2], vec![0.0; 2]).unwrap())
            .unwrap();
        let mut t = Checkpoint::new("t");
        t.insert(TensorEntry::new("w", vec![3], vec![0.0; 3]).unwrap())
            .unwrap();
        assert!(matches!(
            task_vector(&b, &t),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn task_vector_excludes_mismatched_embeddings() {
        let mut b = Checkpoint::new("b");
        b.insert(TensorEntry::new("w", vec![2], vec![0.0; 2]).unwrap())
            .unwrap();
        let mut t = Checkpoint::new("t");
        t.insert(TensorEntry::new("w", vec![2], vec![1.0; 2]).unwrap())
            .unwrap();
        t.insert(
            TensorEntry::new("emb", vec![2, 2], vec![0.0; 4])
                .unwrap()
                .with_row_labels(vec!["a".into(), "b".into()])
                .unwrap(),
        )
        .unwrap();
        let d = task_vector(&b, &t).unwrap();
        assert!(d.excluded.contains("emb"));
        assert!(d.tensor("emb").is_none());
        assert!(d.tensor("w").is_some());
    }

    #[test]
    fn task_vector_excludes_same_shape_different_vocab() {
        // equal shapes but disjoint vocabularies must not be subtracted
        let mk = |id: &str, label: &str| -> Checkpoint {
            let mut c = Checkpoint::new(id);
            c.insert(
                TensorEntry::new("emb", vec![2, 2], vec![1.0; 4])
                    .unwrap()
                    .with_row_labels(vec![format!("{label}1"), format!("{label}2")])
                    .unwrap(),
            )
            .unwrap();
            c
        };
        let d = task_vector(&mk("a", "x"), &mk("b", "y")).unwrap();
        assert!(d.excluded.contains("emb"));
        assert!(d.tensor("emb").is_none());

        // identical vocabularies subtract normally
        let d = task_vector(&mk("a", "x"), &mk("b", "x")).unwrap();
        assert!(d.excluded.is_empty());
        assert_eq!(d.tensor("emb").unwrap().data, vec![0.0; 4]);
    }

    #[test]
    fn apply_inverts_task_vector() {
        let b = ckpt("b", &[("w", vec![0.5, -1.25, 3.0])]);
        let t = ckpt("t", &[("w", vec![2.0, 0.75, -4.5])]);
        let d = tv(&b, &t);
        let r = apply(&b, &d, 1.0).unwrap();
        let max_t = t
            .tensor("w")
            .unwrap()
            .data
            .iter()
            .fold(0.0f32, |m, &v| m.max(v.abs()));
        let tol = 1e-5 * max_t.max(1.0);
        for (got, want) in r
            .tensor("w")
            .unwrap()
            .data
            .iter()
            .zip(&t.tensor("w").unwrap().data)
        {
            assert!((got - want).abs() <= tol);
        }
        assert_eq!(r.lineage.as_deref(), Some("b"));
    }

    #[test]
    fn apply_scale_zero_is_base_bit_exact() {
        let b = ckpt("b", &[("w", vec![-0.0, 1.5, f32::NAN])]);
        let t = ckpt("t", &[("w", vec![9.0, 9.0, 9.0])]);
        let r = apply(&b, &tv(&b, &t), 0.0).unwrap();
        for (x, y) in r
            .tensor("w")
            .unwrap()
            .data
            .iter()
            .zip(&b.tensor("w").unwrap().data)
        {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn apply_scale_two() {
        let b = ckpt("b", &[("w", vec![0.0, 0.0])]);
        let t = ckpt("t", &[("w", vec![1.0, -1.0])]);
        let r = apply(&b, &tv(&b, &t), 2.0).unwrap();
        assert_eq!(r.tensor("w").unwrap().data, vec![2.0, -2.0]);
    }

    #[test]
    fn l1_norm_cases() {
        let b = ckpt("b", &[("w", vec![0.0, 0.0, 0.0])]);
        let t = ckpt("t", &[("w", vec![1.0, -2.0, 3.0])]);
        let (per, total) = l1_norm(&tv(&b, &t));
        assert_eq!(per["w"], 6.0);
        assert_eq!(total, 6.0);
        let (_, zero) = l1_norm(&tv(&b, &b));
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn l1_norm_matches_scalar_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..1000).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let d = TaskVector::from_entries(
            "b",
            "t",
            vec![TensorEntry::new("w", vec![1000], data.clone()).unwrap()],
        );
        let (_, total) = l1_norm(&d);
        let mut oracle = 0.0f64;
        for &v in &data {
            oracle += f64::from(v).abs();
        }
        assert!((total - oracle).abs() <= 1e-9 * oracle.abs());
    }

    #[test]
    fn linear_merge_zero_weights_returns_base_bit_exact() {
        let b = ckpt("b", &[("w", vec![-0.0, 2.0, f32::INFINITY])]);
        let t = ckpt("t", &[("w", vec![1.0, 1.0, 1.0])]);
        let r = linear_merge(&b, &[tv(&b, &t)], &[0.0]).unwrap();
        for (x, y) in r
            .tensor("w")
            .unwrap()
            .data
            .iter()
            .zip(&b.tensor("w").unwrap().data)
        {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn linear_merge_hand_arithmetic() {
        let base = ckpt("b", &[("w", vec![0.0, 0.0])]);
        let t1 = TaskVector::from_entries(
            "b",
            "x",
            vec![TensorEntry::new("w", vec![2], vec![2.0, 0.0]).unwrap()],
        );
        let t2 = TaskVector::from_entries(
            "b",
            "y",
            vec![TensorEntry::new("w", vec![2], vec![0.0, 4.0]).unwrap()],
        );
        let r = linear_merge(&base, &[t1, t2], &[0.5, 0.25]).unwrap();
        assert_eq!(r.tensor("w").unwrap().data, vec![1.0, 1.0]);
        assert_eq!(r.lineage.as_deref(), Some("x+y"));
    }

    #[test]
    fn linear_merge_equal_weight_pair() {
        // two task vectors at lambda = 0.5 each
        let base = ckpt("b", &[("w", vec![1.0, 1.0])]);
        let ta = ckpt("a", &[("w", vec![3.0, 1.0])]);
        let tb = ckpt("c", &[("w", vec![1.0, 5.0])]);
        let r = linear_merge(&base, &[tv(&base, &ta), tv(&base, &tb)], &[0.5, 0.5]).unwrap();
        assert_eq!(r.tensor("w").unwrap().data, vec![2.0, 3.0]);
    }

    #[test]
    fn linear_merge_empty_is_error() {
        let b = ckpt("b", &[("w", vec![0.0])]);
        assert!(linear_merge(&b, &[], &[]).is_err());
    }

    #[test]
    fn ties_trim_identity_at_100() {
        let d = TaskVector::from_entries(
            "b",
            "t",
            vec![TensorEntry::new("w", vec![4], vec![0.1, -5.0, 3.0, 0.2]).unwrap()],
        );
        assert_eq!(
            ties_trim(&d, 100.0).unwrap().tensor("w").unwrap().data,
            d.tensor("w").unwrap().data
        );
    }

    #[test]
    fn ties_trim_top_half() {
        let d = TaskVector::from_entries(
            "b",
            "t",
            vec![TensorEntry::new("w", vec![4], vec![0.1, -5.0, 3.0, 0.2]).unwrap()],
        );
        let r = ties_trim(&d, 50.0).unwrap();
        assert_eq!(r.tensor("w").unwrap().data, vec![0.0, -5.0, 3.0, 0.0]);
    }

    #[test]
    fn ties_trim_threshold_tie_keeps_lower_index() {
        let d = TaskVector::from_entries(
            "b",
            "t",
            vec![TensorEntry::new("w", vec![4], vec![1.0, -1.0, 1.0, 2.0]).unwrap()],
        );
        // k = 2: |2.0| first, then tie among three 1.0-magnitude entries -> index 0 wins
        let r = ties_trim(&d, 50.0).unwrap();
        assert_eq!(r.tensor("w").unwrap().data, vec![1.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn ties_trim_nonzero_count() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f32> = (0..1000).map(|_| rng.gen_range(-1.0..1.0f32)).collect();
        let d = TaskVector::from_entries(
            "b",
            "t",
            vec![TensorEntry::new("w", vec![1000], data).unwrap()],
        );
        let r = ties_trim(&d, 20.0).unwrap();
        let nonzero = r
            .tensor("w")
            .unwrap()
            .data
            .iter()
            .filter(|&&v| v != 0.0)
            .count();
        assert_eq!(nonzero, 200);
    }

    #[test]
    fn sign_elect_cases() {
        let mk = |vals: Vec<f32>, id: &str| {
            TaskVector::from_entries("b", id, vec![TensorEntry::new("w", vec![2], vals).unwrap()])
        };
        // coord 0: +3 vs -1 -> +; coord 1: +1 vs -1 -> 0
        let a = mk(vec![3.0, 1.0], "a");
        let b = mk(vec![-1.0, -1.0], "c");
        let signs = sign_elect(&[a, b]).unwrap();
        assert_eq!(signs["w"], vec![1, 0]);
    }

    #[test]
    fn sign_elect_scale_covariant() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mk = |rng: &mut rand_chacha::ChaCha8Rng, id: &str, scale: f32| {
            let data: Vec<f32> = (0..100)
                .map(|_| rng.gen_range(-1.0..1.0f32) * scale)
                .collect();
            TaskVector::from_entries(
                "b",
                id,
                vec![TensorEntry::new("w", vec![100], data).unwrap()],
            )
        };
        let tvs: Vec<TaskVector> = (0..3)
            .map(|i| mk(&mut rng, &format!("t{i}"), 1.0))
            .collect();
        let scaled: Vec<TaskVector> = tvs
            .iter()
            .map(|t| t.map_data(|e| e.data.iter().map(|&v| v * 4.0).collect()))
            .collect();
        assert_eq!(sign_elect(&tvs).unwrap(), sign_elect(&scaled).unwrap());
    }

    #[test]
    fn dare_identity_at_p0() {
        let d = TaskVector::from_entries(
            "b",
            "t",
            vec![TensorEntry::new("w", vec![3], vec![1.5, -2.5, 0.0]).unwrap()],
        );
        let r = dare_trim(&d, 0.0, 99).unwrap();
        for (x, y) in r
            .tensor("w")
            .unwrap()
            .data
            .iter()
            .zip(&d.tensor("w").unwrap().data)
        {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn dare_deterministic_across_calls() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let data: Vec<f32> = (0..10_000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d = TaskVector::from_entries(
            "b",
            "t",
            vec![TensorEntry::new("w", vec![10_000], data).unwrap()],
        );
        let a = dare_trim(&d, 0.1, 7).unwrap();
        let b = dare_trim(&d, 0.1, 7).unwrap();
        assert_eq!(a.tensor("w").unwrap().data, b.tensor("w").unwrap().data);
        let c = dare_trim(&d, 0.1, 8).unwrap();
        assert_ne!(a.tensor("w").unwrap().data, c.tensor("w").unwrap().data);
    }

    #[test]
    fn subspace_identity_composition() {
        let b = ckpt("b", &[("w", vec![1.0, 2.0])]);
        let t = ckpt("t", &[("w", vec![2.0, 4.0])]);
        let trim = TrimConfig {
            ties_keep_percent: Some(100.0),
            ..Default::default()
        };
        let r = subspace_merge(&b, &[tv(&b, &t)], &trim).unwrap();
        assert_eq!(r.tensor("w").unwrap().data, vec![2.0, 4.0]);
    }

    #[test]
    fn subspace_hand_oracle_with_conflicts() {
        // Two vectors, X=50 keeps top-2 of 4; conflicting signs at coord 0.
        let base = ckpt("b", &[("w", vec![0.0, 0.0, 0.0, 0.0])]);
        let t1 = TaskVector::from_entries(
            "b",
            "x",
            vec![TensorEntry::new("w", vec![4], vec![4.0, 3.0, 0.1, 0.2]).unwrap()],
        );
        let t2 = TaskVector::from_entries(
            "b",
            "y",
            vec![TensorEntry::new("w", vec![4], vec![-5.0, 2.0, 0.3, 0.1]).unwrap()],
        );
        let trim = TrimConfig {
            ties_keep_percent: Some(50.0),
            ties_sign_election: true,
            ..Default::default()
        };
        // trim: t1 -> [4,3,0,0], t2 -> [-5,2,0,0]
        // elect: coord0 4 vs 5 -> minus; coord1 plus
        // mask: t1 -> [0,3,0,0]; t2 -> [-5,2,0,0]
        // mean over N=2: [-2.5, 2.5, 0, 0]
        let r = subspace_merge(&base, &[t1.clone(), t2.clone()], &trim).unwrap();
        assert_eq!(r.tensor("w").unwrap().data, vec![-2.5, 2.5, 0.0, 0.0]);

        // survivors-only mean: coord0 has one survivor -> -5
        let disjoint = TrimConfig {
            ties_disjoint_mean: true,
            ..trim
        };
        let r = subspace_merge(&base, &[t1, t2], &disjoint).unwrap();
        assert_eq!(r.tensor("w").unwrap().data, vec![-5.0, 2.5, 0.0, 0.0]);
    }

    #[test]
    fn alpha_merge_endpoints_and_midpoint() {
        let b = ckpt("b", &[("w", vec![1.0, 1.0])]);
        let u = TaskVector::from_entries(
            "b",
            "u",
            vec![TensorEntry::new("w", vec![2], vec![2.0, 0.0]).unwrap()],
        );
        let v = TaskVector::from_entries(
            "b",
            "v",
            vec![TensorEntry::new("w", vec![2], vec![0.0, 4.0]).unwrap()],
        );
        let r1 = alpha_merge(&b, &u, &v, 1.0, None).unwrap();
        assert_eq!(r1.tensor("w").unwrap().data, vec![3.0, 1.0]);
        let r0 = alpha_merge(&b, &u, &v, 0.0, None).unwrap();
        assert_eq!(r0.tensor("w").unwrap().data, vec![1.0, 5.0]);
        // alpha = 0.5 equals (u + v) / 2 over the base
        let rh = alpha_merge(&b, &u, &v, 0.5, None).unwrap();
        assert_eq!(rh.tensor("w").unwrap().data, vec![2.0, 3.0]);
    }

    #[test]
    fn alpha_sweep_is_linear_per_coordinate() {
        let b = ckpt("b", &[("w", vec![0.5, -0.5])]);
        let u = TaskVector::from_entries(
            "b",
            "u",
            vec![TensorEntry::new("w", vec![2], vec![1.0, 2.0]).unwrap()],
        );
        let v = TaskVector::from_entries(
            "b",
            "v",
            vec![TensorEntry::new("w", vec![2], vec![-3.0, 1.0]).unwrap()],
        );
        for &a in &[0.0, 0.25, 0.5, 0.75, 1.0] {
            let r = alpha_merge(&b, &u, &v, a, None).unwrap();
            for i in 0..2 {
                let base = f64::from(b.tensor("w").unwrap().data[i]);
                let ud = f64::from(u.tensor("w").unwrap().data[i]);
                let vd = f64::from(v.tensor("w").unwrap().data[i]);
                let want = (base + a * ud + (1.0 - a) * vd) as f32;
                assert_eq!(r.tensor("w").unwrap().data[i], want);
            }
        }
    }

    #[test]
    fn average_merge_idempotent_and_hand_case() {
        let c = ckpt("c", &[("w", vec![1.0, 3.0])]);
        let r = average_merge(&[&c, &c]).unwrap();
        assert_eq!(r.tensor("w").unwrap().data, vec![1.0, 3.0]);

        let a = ckpt("a", &[("w", vec![1.0, 3.0])]);
        let b = ckpt("b", &[("w", vec![3.0, 5.0])]);
        let r = average_merge(&[&a, &b]).unwrap();
        assert_eq!(r.tensor("w").unwrap().data, vec![2.0, 4.0]);
    }

    #[test]
    fn average_merge_permutation_invariant() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let mut mk = |id: &str| {
            let data: Vec<f32> = (0..64).map(|_| rng.gen_range(-2.0..2.0)).collect();
            ckpt(id, &[("w", data)])
        };
        let (a, b, c) = (mk("a"), mk("b"), mk("c"));
        let r1 = average_merge(&[&a, &b, &c]).unwrap();
        let r2 = average_merge(&[&c, &a, &b]).unwrap();
        let bits = |c: &Checkpoint| -> Vec<u32> {
            c.tensor("w")
                .unwrap()
                .data
                .iter()
                .map(|v| v.to_bits())
                .collect()
        };
        assert_eq!(bits(&r1), bits(&r2));
    }

    fn emb(
        name: &str,
        labels: &[&str],
        cols: usize,
        fill: impl Fn(usize, usize) -> f32,
    ) -> TensorEntry {
        let rows = labels.len();
        let data: Vec<f32> = (0..rows * cols).map(|i| fill(i / cols, i % cols)).collect();
        TensorEntry::new(name, vec![rows, cols], data)
            .unwrap()
            .with_row_labels(labels.iter().map(|s| s.to_string()).collect())
            .unwrap()
    }

    #[test]
    fn vocab_union_no_expansion_is_plain_merge() {
        let a = emb("e", &["s1", "s2"], 2, |r, c| (r * 2 + c) as f32);
        let b = emb("e", &["s1", "s2"], 2, |r, c| (r * 2 + c) as f32 + 2.0);
        let m = vocab_union_merge(&a, &b, 2, mean_pair).unwrap();
        assert_eq!(m.shape, vec![2, 2]);
        assert_eq!(m.data, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn vocab_union_appends_expanded_rows() {
        let a = emb("e", &["s1", "s2", "a"], 2, |r, _| r as f32);
        let b = emb("e", &["s1", "s2", "b"], 2, |r, _| 10.0 + r as f32);
        let m = vocab_union_merge(&a, &b, 2, mean_pair).unwrap();
        assert_eq!(m.shape[0], 4);
        assert_eq!(
            m.row_labels.as_ref().unwrap(),
            &vec!["s1".to_string(), "s2".into(), "a".into(), "b".into()]
        );
        // expanded rows bit-equal their source rows
        assert_eq!(&m.data[4..6], &a.data[4..6]);
        assert_eq!(&m.data[6..8], &b.data[4..6]);
    }

    #[test]
    fn vocab_union_rejects_overlapping_expansion() {
        let a = emb("e", &["s1", "x"], 2, |_, _| 0.0);
        let b = emb("e", &["s1", "x"], 2, |_, _| 1.0);
        assert!(vocab_union_merge(&a, &b, 1, mean_pair).is_err());
    }

    #[test]
    fn vocab_union_rejects_shared_prefix_mismatch() {
        let a = emb("e", &["s1", "a"], 2, |_, _| 0.0);
        let b = emb("e", &["s2", "b"], 2, |_, _| 1.0);
        assert!(vocab_union_merge(&a, &b, 1, mean_pair).is_err());
    }

    #[test]
    fn recipe_validation() {
        let mut r = MergeRecipe {
            method: MergeMethod::Linear,
            inputs: vec!["a".into(), "b".into()],
            weights: Some(vec![0.5, 0.5]),
            alpha: None,
            trim: None,
            base: BaseStrategy::Pretrained,
            output_id: "out".into(),
            no_base_term: false,
        };
        assert!(r.validate().is_ok());
        r.weights = Some(vec![0.5]);
        assert!(r.validate().is_err());
        r.method = MergeMethod::AlphaPair;
        r.alpha = Some(1.5);
        assert!(r.validate().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn values(max_len: usize) -> impl Strategy<Value = Vec<f32>> {
            proptest::collection::vec(-1.0e3f32..1.0e3, 1..max_len)
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            // rescaling inputs by a power of two and weights by its inverse
            // leaves the merge unchanged
            #[test]
            fn linear_merge_is_scale_stable(data in values(256), lambda in -2.0f64..2.0, c in prop_oneof![Just(0.5f32), Just(2.0), Just(4.0)]) {
                let n = data.len();
                let base = ckpt("b", &[("w", vec![0.0; n])]);
                let tv = TaskVector::from_entries("b", "t", vec![TensorEntry::new("w", vec![n], data.clone()).unwrap()]);
                let scaled = tv.map_data(|t| t.data.iter().map(|&v| v * c).collect());
                let a = linear_merge(&base, &[tv], &[lambda]).unwrap();
                let b = linear_merge(&base, &[scaled], &[lambda / f64::from(c)]).unwrap();
                for (x, y) in a.tensor("w").unwrap().data.iter().zip(&b.tensor("w").unwrap().data) {
                    prop_assert!(x.to_bits() == y.to_bits() || (x - y).abs() <= f32::EPSILON * x.abs());
                }
            }

            // equal-weight linear merge of task vectors equals the average
            // of the corresponding checkpoints, to 1e-6 of the data scale
            // (task vectors round in f32, so cancellation can leave results
            // far smaller than the inputs)
            #[test]
            fn equal_weight_linear_matches_average(base_data in values(128), deltas in proptest::collection::vec(-10.0f32..10.0, 128 * 3)) {
                let n = base_data.len();
                let base = ckpt("base", &[("w", base_data.clone())]);
                let mut targets = Vec::new();
                for k in 0..3 {
                    let data: Vec<f32> = (0..n).map(|i| base_data[i] + deltas[k * 128 + i]).collect();
                    targets.push(ckpt(&format!("t{k}"), &[("w", data)]));
                }
                let tvs: Vec<TaskVector> = targets.iter().map(|t| tv(&base, t)).collect();
                let merged = linear_merge(&base, &tvs, &[1.0 / 3.0; 3]).unwrap();
                let refs: Vec<&Checkpoint> = targets.iter().collect();
                let averaged = average_merge(&refs).unwrap();
                for (i, (x, y)) in merged.tensor("w").unwrap().data.iter().zip(&averaged.tensor("w").unwrap().data).enumerate() {
                    let scale = targets
                        .iter()
                        .map(|t| t.tensor("w").unwrap().data[i].abs())
                        .fold(base_data[i].abs(), f32::max);
                    let tol = 1e-6 * f64::from(scale).max(1e-9);
                    prop_assert!((f64::from(*x) - f64::from(*y)).abs() <= tol, "{x} vs {y}");
                }
            }

            // trimming keeps exactly ceil(X/100 * numel) nonzeros when the
            // input has no exact zeros
            #[test]
            fn ties_trim_nonzero_budget(data in proptest::collection::vec(prop_oneof![0.001f32..100.0, -100.0f32..-0.001], 1..512), x in 1.0f64..100.0) {
                let n = data.len();
                let d = TaskVector::from_entries("b", "t", vec![TensorEntry::new("w", vec![n], data).unwrap()]);
                let trimmed = ties_trim(&d, x).unwrap();
                let nonzero = trimmed.tensor("w").unwrap().data.iter().filter(|&&v| v != 0.0).count();
                let want = ((x / 100.0) * n as f64).ceil() as usize;
                prop_assert_eq!(nonzero, want.min(n));
            }

            // dare masks depend only on (value, p, seed)
            #[test]
            fn dare_trim_is_deterministic(data in values(512), seed in any::<u64>(), p in 0.0f64..0.95) {
                let n = data.len();
                let d = TaskVector::from_entries("b", "t", vec![TensorEntry::new("w", vec![n], data).unwrap()]);
                let a = dare_trim(&d, p, seed).unwrap();
                let b = dare_trim(&d, p, seed).unwrap();
                let bits = |t: &TaskVector| t.tensor("w").unwrap().data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                prop_assert_eq!(bits(&a), bits(&b));
            }

            // multiplying every task vector by one positive constant leaves
            // elected signs unchanged
            #[test]
            fn sign_elect_scale_covariance(data in proptest::collection::vec(-50.0f32..50.0, 64 * 2), c in prop_oneof![Just(2.0f32), Just(8.0), Just(0.25)]) {
                let mk = |offset: usize| TaskVector::from_entries("b", "t", vec![
                    TensorEntry::new("w", vec![64], data[offset..offset + 64].to_vec()).unwrap(),
                ]);
                let tvs = [mk(0), mk(64)];
                let scaled: Vec<TaskVector> = tvs.iter().map(|t| t.map_data(|e| e.data.iter().map(|&v| v * c).collect())).collect();
                prop_assert_eq!(sign_elect(&tvs).unwrap(), sign_elect(&scaled).unwrap());
            }
        }
    }

    #[test]
    fn recipe_round_trips_through_json() {
        let r = MergeRecipe {
            method: MergeMethod::Subspace,
            inputs: vec!["a".into(), "b".into()],
            weights: None,
            alpha: None,
            trim: Some(TrimConfig {
                ties_keep_percent: Some(20.0),
                ties_sign_election: true,
                dare_drop_prob: Some(0.1),
                seed: Some(42),
                order: TrimOrder::DareThenTies,
                ties_disjoint_mean: false,
            }),
            base: BaseStrategy::Neutral {
                members: vec![
                    crate::grid::GridCell {
                        domain: "a".into(),
                        phase: "t1".into(),
                    },
                    crate::grid::GridCell {
                        domain: "b".into(),
                        phase: "t1".into(),
                    },
                ],
            },
            output_id: "m".into(),
            no_base_term: false,
        };
        let json = serde_json::to_string(&r).unwrap();
        let back: MergeRecipe = serde_json::from_str(&json).unwrap();
        assert_eq!(r, back);
    }
}
