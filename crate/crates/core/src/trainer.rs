//! Toy embedding-based next-item recommender: scores items by
//! dot(transform(mean of the last L item embeddings), item embedding) and
//! trains with sampled-softmax cross-entropy and plain SGD.
//!
//! It exists to populate the grid with real trained checkpoints whose
//! merging behavior can be observed; it is deliberately tiny. Training is
//! single-threaded and bit-reproducible per seed.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::counter_rng::fnv1a64;
use crate::error::{Error, Result};
use crate::synth::{InteractionLog, Window};
use crate::tensor_store::{Checkpoint, TensorEntry};

pub const ITEM_EMBEDDINGS: &str = "item_embeddings";
pub const TRANSFORM_MATRIX: &str = "transform_matrix";
const HISTORY_WINDOW_KEY: &str = "history_window";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyModelSpec {
    pub latent_dim: usize,
    /// History window L: the user vector pools the last L interacted items.
    pub history_window: usize,
    pub learning_rate: f32,
    pub epochs_pretrain: usize,
    pub epochs_incremental: usize,
    /// Uniform negatives per step; ignored when `full_softmax` is set.
    pub negatives_per_step: usize,
    /// Exact softmax over the whole corpus (small fixtures only).
    #[serde(default)]
    pub full_softmax: bool,
    pub seed: u64,
}

impl Default for ToyModelSpec {
    fn default() -> Self {
        ToyModelSpec {
            latent_dim: 8,
            history_window: 10,
            learning_rate: 0.1,
            epochs_pretrain: 3,
            epochs_incremental: 2,
            negatives_per_step: 16,
            full_softmax: false,
            seed: 0,
        }
    }
}

impl ToyModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0
            || self.history_window == 0
            || self.epochs_pretrain == 0
            || self.epochs_incremental == 0
        {
            return Err(Error::InvalidConfig(
                "model spec counts must be positive".into(),
            ));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !self.full_softmax && self.negatives_per_step == 0 {
            return Err(Error::InvalidConfig(
                "sampled softmax needs negatives_per_step > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    P1,
    P2,
}

impl Stage {
    pub fn window(self) -> Window {
        match self {
            Stage::Pretrain => Window::Pretrain,
            Stage::P1 => Window::P1,
            Stage::P2 => Window::P2,
        }
    }

    /// Phase label of the checkpoint this stage produces.
    pub fn phase(self) -> &'static str {
        match self {
            Stage::Pretrain => "t0",
            Stage::P1 => "t1",
            Stage::P2 => "t2",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::P1 => "p1",
            Stage::P2 => "p2",
        }
    }

    pub fn epochs(self, spec: &ToyModelSpec) -> usize {
        match self {
            Stage::Pretrain => spec.epochs_pretrain,
            Stage::P1 | Stage::P2 => spec.epochs_incremental,
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "p1" => Ok(Stage::P1),
            "p2" => Ok(Stage::P2),
            other => Err(Error::InvalidConfig(format!(
                "unknown stage {other:?} (expected pretrain, p1, or p2)"
            ))),
        }
    }
}

/// In-memory model: row-major `[n_items, dim]` embeddings plus a
/// `[dim, dim]` transform, with row labels naming the item vocabulary.
#[derive(Debug, Clone)]
pub struct ToyModel {
    pub item_labels: Vec<String>,
    pub item_embeddings: Vec<f32>,
    pub transform: Vec<f32>,
    pub dim: usize,
    pub history_window: usize,
}

impl ToyModel {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<ToyModel> {
        let emb = ckpt
            .tensor(ITEM_EMBEDDINGS)
            .ok_or_else(|| Error::MissingTensor {
                name: ITEM_EMBEDDINGS.into(),
                ckpt: ckpt.id.clone(),
            })?;
        let transform = ckpt
            .tensor(TRANSFORM_MATRIX)
            .ok_or_else(|| Error::MissingTensor {
                name: TRANSFORM_MATRIX.into(),
                ckpt: ckpt.id.clone(),
            })?;
        if emb.shape.len() != 2 {
            return Err(Error::InvalidTensor {
                name: ITEM_EMBEDDINGS.into(),
                reason: format!("expected 2-D, got {:?}", emb.shape),
            });
        }
        let dim = emb.shape[1];
        if transform.shape != vec![dim, dim] {
            return Err(Error::InvalidTensor {
                name: TRANSFORM_MATRIX.into(),
                reason: format!("expected [{dim}, {dim}], got {:?}", transform.shape),
            });
        }
        let labels = emb.row_labels.clone().ok_or_else(|| Error::InvalidTensor {
            name: ITEM_EMBEDDINGS.into(),
            reason: "missing row_labels naming the item vocabulary".into(),
        })?;
        let history_window = match ckpt.extra.get(HISTORY_WINDOW_KEY) {
            Some(s) => s.parse().map_err(|_| {
                Error::InvalidConfig(format!(
                    "checkpoint {} carries a bad {HISTORY_WINDOW_KEY}: {s:?}",
                    ckpt.id
                ))
            })?,
            None => 10,
        };
        Ok(ToyModel {
            item_labels: labels,
            item_embeddings: emb.data.clone(),
            transform: transform.data.clone(),
            dim,
            history_window,
        })
    }

    pub fn to_checkpoint(
        &self,
        id: &str,
        domain: Option<String>,
        phase: Option<String>,
        lineage: Option<String>,
        seed: Option<u64>,
    ) -> Checkpoint {
        let n = self.item_labels.len();
        let mut ckpt = Checkpoint::new(id);
        ckpt.domain = domain;
        ckpt.phase = phase;
        ckpt.lineage = lineage;
        ckpt.seed = seed;
        ckpt.paradigm = Some("toy_embedding".into());
        ckpt.extra
            .insert(HISTORY_WINDOW_KEY.into(), self.history_window.to_string());
        ckpt.insert(
            TensorEntry::new(
                ITEM_EMBEDDINGS,
                vec![n, self.dim],
                self.item_embeddings.clone(),
            )
            .expect("embedding tensor is well-formed")
            .with_row_labels(self.item_labels.clone())
            .expect("labels match rows"),
        )
        .expect("fresh checkpoint");
        ckpt.insert(
            TensorEntry::new(
                TRANSFORM_MATRIX,
                vec![self.dim, self.dim],
                self.transform.clone(),
            )
            .expect("transform tensor is well-formed"),
        )
        .expect("fresh checkpoint");
        ckpt
    }

    pub fn row_of(&self, item: &str) -> Option<usize> {
        self.item_labels
            .binary_search_by(|l| l.as_str().cmp(item))
            .ok()
    }

    pub fn label_of(&self, row: usize) -> &str {
        &self.item_labels[row]
    }

    fn embedding(&self, row: usize) -> &[f32] {
        &self.item_embeddings[row * self.dim..(row + 1) * self.dim]
    }

    /// Mean of the history rows' embeddings pushed through the transform.
    pub fn user_vector(&self, history_rows: &[usize]) -> Vec<f32> {
        let mut h = vec![0.0f32; self.dim];
        for &row in history_rows {
            for (acc, &v) in h.iter_mut().zip(self.embedding(row)) {
                *acc += v;
            }
        }
        let inv = 1.0 / history_rows.len() as f32;
        for v in &mut h {
            *v *= inv;
        }
        // u[j] = sum_k h[k] * W[k, j]
        let mut u = vec![0.0f32; self.dim];
        for (k, &hk) in h.iter().enumerate() {
            if hk != 0.0 {
                let row = &self.transform[k * self.dim..(k + 1) * self.dim];
                for (uj, &w) in u.iter_mut().zip(row) {
                    *uj += hk * w;
                }
            }
        }
        u
    }

    pub fn score(&self, user_vec: &[f32], item_row: usize) -> f32 {
        user_vec
            .iter()
            .zip(self.embedding(item_row))
            .map(|(a, b)| a * b)
            .sum()
    }
}

/// Train one stage on the log, starting from `init` when given (required for
/// p1/p2). Tensors present in `init` seed the parameters: the transform is
/// copied, embedding rows are matched by label, and unseen rows initialize
/// randomly.
pub fn train(
    log: &InteractionLog,
    spec: &ToyModelSpec,
    stage: Stage,
    init: Option<&Checkpoint>,
) -> Result<Checkpoint> {
    spec.validate()?;
    if matches!(stage, Stage::P1 | Stage::P2) && init.is_none() {
        return Err(Error::InvalidConfig(format!(
            "stage {} requires an init checkpoint",
            stage.label()
        )));
    }
    let window_indices: Vec<usize> = log
        .events
        .iter()
        .enumerate()
        .filter(|(_, e)| log.boundaries.window_of(e.ts) == stage.window())
        .map(|(i, _)| i)
        .collect();
    if window_indices.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "no events in the {} window",
            stage.label()
        )));
    }

    let domain = log.domain.clone().unwrap_or_default();
    // vocabulary = log items plus whatever the init checkpoint already
    // knows; rows for uninteracted items ride along untouched
    let mut label_set: std::collections::BTreeSet<String> =
        log.item_first_seen.keys().cloned().collect();
    if let Some(init_emb) = init.and_then(|c| c.tensor(ITEM_EMBEDDINGS)) {
        if let Some(labels) = &init_emb.row_labels {
            label_set.extend(labels.iter().cloned());
        }
    }
    let item_labels: Vec<String> = label_set.into_iter().collect();
    let n_items = item_labels.len();
    if n_items < 2 {
        return Err(Error::InvalidConfig(
            "need at least 2 items to train".into(),
        ));
    }
    let dim = spec.latent_dim;

    let mut rng = ChaCha8Rng::seed_from_u64(
        spec.seed ^ fnv1a64(format!("train:{domain}:{}", stage.label()).as_bytes()),
    );

    // The init checkpoint may be partial: a shared base carries only the
    // transform, an earlier stage carries both tensors. Whatever is present
    // seeds the parameters; the rest initializes randomly.
    let init_transform = match init.and_then(|c| c.tensor(TRANSFORM_MATRIX)) {
        Some(t) if t.shape == vec![dim, dim] => Some(t.data.clone()),
        Some(t) => {
            return Err(Error::InvalidConfig(format!(
                "init transform shape {:?} != [{dim}, {dim}]",
                t.shape
            )))
        }
        None => None,
    };
    let init_rows: BTreeMap<&str, &[f32]> = match init.and_then(|c| c.tensor(ITEM_EMBEDDINGS)) {
        Some(t) => {
            if t.shape.len() != 2 || t.shape[1] != dim {
                return Err(Error::InvalidConfig(format!(
                    "init embedding shape {:?} incompatible with latent_dim {dim}",
                    t.shape
                )));
            }
            let labels = t.row_labels.as_ref().ok_or_else(|| Error::InvalidTensor {
                name: ITEM_EMBEDDINGS.into(),
                reason: "init embedding table lacks row_labels".into(),
            })?;
            labels
                .iter()
                .enumerate()
                .map(|(r, l)| (l.as_str(), &t.data[r * dim..(r + 1) * dim]))
                .collect()
        }
        None => BTreeMap::new(),
    };

    let mut transform = match init_transform {
        Some(w) => w,
        None => {
            let mut w = vec![0.0f32; dim * dim];
            for (i, v) in w.iter_mut().enumerate() {
                let noise: f32 = rng.gen_range(-0.05..0.05);
                *v = noise + if i / dim == i % dim { 1.0 } else { 0.0 };
            }
            w
        }
    };
    let scale = (1.0 / dim as f32).sqrt();
    let mut embeddings = vec![0.0f32; n_items * dim];
    for (row, label) in item_labels.iter().enumerate() {
        match init_rows.get(label.as_str()) {
            Some(values) => embeddings[row * dim..(row + 1) * dim].copy_from_slice(values),
            None => {
                for v in &mut embeddings[row * dim..(row + 1) * dim] {
                    *v = rng.gen_range(-scale..scale);
                }
            }
        }
    }

    let row_of: BTreeMap<&str, usize> = item_labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();

    // per-user ordered item-row sequences with global event indices
    let mut user_events: BTreeMap<&str, Vec<(usize, usize)>> = BTreeMap::new();
    for (idx, e) in log.events.iter().enumerate() {
        user_events
            .entry(&e.user)
            .or_default()
            .push((idx, row_of[e.item.as_str()]));
    }

    let lr = spec.learning_rate;
    let epochs = stage.epochs(spec);
    for epoch in 0..epochs {
        for (step, &event_idx) in window_indices.iter().enumerate() {
            let event = &log.events[event_idx];
            let target = row_of[event.item.as_str()];
            let history: Vec<usize> = user_events[event.user.as_str()]
                .iter()
                .take_while(|(i, _)| *i < event_idx)
                .map(|(_, row)| *row)
                .collect();
            if history.is_empty() {
                continue;
            }
            let start = history.len().saturating_sub(spec.history_window);
            let history = &history[start..];
            let l_hist = history.len() as f32;

            // forward: h = mean of history embeddings, u = h W
            let mut h = vec![0.0f32; dim];
            for &row in history {
                for (acc, &v) in h.iter_mut().zip(&embeddings[row * dim..(row + 1) * dim]) {
                    *acc += v;
                }
            }
            for v in &mut h {
                *v /= l_hist;
            }
            let mut u = vec![0.0f32; dim];
            for k in 0..dim {
                let hk = h[k];
                for j in 0..dim {
                    u[j] += hk * transform[k * dim + j];
                }
            }

            // candidates: target first, then negatives
            let mut candidates = vec![target];
            if spec.full_softmax {
                candidates.extend((0..n_items).filter(|&i| i != target));
            } else {
                for _ in 0..spec.negatives_per_step {
                    loop {
                        let c = rng.gen_range(0..n_items);
                        if c != target {
                            candidates.push(c);
                            break;
                        }
                    }
                }
            }

            let logits: Vec<f32> = candidates
                .iter()
                .map(|&c| {
                    u.iter()
                        .zip(&embeddings[c * dim..(c + 1) * dim])
                        .map(|(a, b)| a * b)
                        .sum()
                })
                .collect();
            let max_logit = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
            let exps: Vec<f32> = logits.iter().map(|&z| (z - max_logit).exp()).collect();
            let z_sum: f32 = exps.iter().sum();
            let loss = -(exps[0] / z_sum).ln();
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "NaN loss at stage {} epoch {epoch} step {step}",
                    stage.label()
                )));
            }

            // backward: dz_c = softmax_c - 1{c == target}
            let mut du = vec![0.0f32; dim];
            let mut dq: Vec<(usize, Vec<f32>)> = Vec::with_capacity(candidates.len());
            for (pos, &c) in candidates.iter().enumerate() {
                let dz = exps[pos] / z_sum - if pos == 0 { 1.0 } else { 0.0 };
                let q = &embeddings[c * dim..(c + 1) * dim];
                for (a, &v) in du.iter_mut().zip(q) {
                    *a += dz * v;
                }
                dq.push((c, u.iter().map(|&v| dz * v).collect()));
            }
            // dh = W du; dW[k, j] = h[k] * du[j]
            let mut dh = vec![0.0f32; dim];
            for k in 0..dim {
                let mut acc = 0.0f32;
                for j in 0..dim {
                    acc += transform[k * dim + j] * du[j];
                }
                dh[k] = acc;
            }
            for k in 0..dim {
                let hk = h[k];
                if hk != 0.0 {
                    for j in 0..dim {
                        transform[k * dim + j] -= lr * hk * du[j];
                    }
                }
            }
            for (c, grad) in dq {
                for (w, &g) in embeddings[c * dim..(c + 1) * dim].iter_mut().zip(&grad) {
                    *w -= lr * g;
                }
            }
            let hist_scale = lr / l_hist;
            for &row in history {
                for (w, &g) in embeddings[row * dim..(row + 1) * dim].iter_mut().zip(&dh) {
                    *w -= hist_scale * g;
                }
            }
        }
    }

    let model = ToyModel {
        item_labels,
        item_embeddings: embeddings,
        transform,
        dim,
        history_window: spec.history_window,
    };
    let id = format!("{domain}_{}", stage.phase());
    Ok(model.to_checkpoint(
        &id,
        log.domain.clone(),
        Some(stage.phase().into()),
        init.map(|c| c.id.clone()),
        Some(spec.seed),
    ))
}
