//! Executes a [`MergeRecipe`](crate::merge::MergeRecipe) against a grid
//! manifest: resolves the base strategy, computes task vectors, runs the
//! configured merge, and routes shape-mismatched embedding tables through
//! the vocabulary-union path.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::grid::{resolve_base, GridManifest};
use crate::merge::{
    self, shared_label_prefix, vocab_union_merge, MergeMethod, MergeRecipe, TaskVector, TrimConfig,
};
use crate::tensor_store::{Checkpoint, TensorEntry};

/// Load inputs and base from the manifest and run the merge.
pub fn execute_recipe(recipe: &MergeRecipe, manifest: &GridManifest) -> Result<Checkpoint> {
    recipe.validate()?;
    let inputs: Vec<Checkpoint> = recipe
        .inputs
        .iter()
        .map(|id| manifest.load_by_id(id))
        .collect::<Result<_>>()?;
    let base = resolve_base(manifest, &recipe.base)?;
    execute_with(recipe, &base, &inputs)
}

/// Run the merge against already-loaded checkpoints.
pub fn execute_with(
    recipe: &MergeRecipe,
    base: &Checkpoint,
    inputs: &[Checkpoint],
) -> Result<Checkpoint> {
    recipe.validate()?;
    if inputs.len() != recipe.inputs.len() {
        return Err(Error::InvalidRecipe(format!(
            "recipe names {} inputs but {} checkpoints were supplied",
            recipe.inputs.len(),
            inputs.len()
        )));
    }

    let mut merged = match recipe.method {
        MergeMethod::Average => {
            let refs: Vec<&Checkpoint> = inputs.iter().collect();
            merge::average_merge(&refs)?
        }
        _ => {
            let tvs: Vec<TaskVector> = inputs
                .iter()
                .map(|c| merge::task_vector(base, c))
                .collect::<Result<_>>()?;
            // dropping the base term means adding the weighted task vectors
            // onto zeros instead of onto the base
            let additive_base = if recipe.no_base_term {
                let mut zeroed = base.map_data(base.id.clone(), |t| vec![0.0; t.numel()]);
                zeroed.domain = base.domain.clone();
                zeroed
            } else {
                base.clone()
            };
            match recipe.method {
                MergeMethod::Linear => merge::linear_merge(
                    &additive_base,
                    &tvs,
                    recipe.weights.as_ref().expect("validated"),
                )?,
                MergeMethod::Subspace => merge::subspace_merge(
                    &additive_base,
                    &tvs,
                    recipe.trim.as_ref().expect("validated"),
                )?,
                MergeMethod::AlphaPair => merge::alpha_merge(
                    &additive_base,
                    &tvs[0],
                    &tvs[1],
                    recipe.alpha.expect("validated"),
                    recipe.trim.as_ref(),
                )?,
                MergeMethod::Average => unreachable!(),
            }
        }
    };

    // vocabulary-union pass over embedding tables the task-vector path
    // excluded (present in some inputs with mismatched shapes); these
    // replace whatever the base passed through
    if recipe.method != MergeMethod::Average {
        let excluded = excluded_names(base, inputs)?;
        for name in excluded {
            let holders: Vec<&TensorEntry> =
                inputs.iter().filter_map(|c| c.tensor(&name)).collect();
            let entry = merge_embedding_union(recipe, base, &name, &holders)?;
            merged.remove(&name);
            merged.insert(entry)?;
        }
    }

    merged.id = recipe.output_id.clone();
    merged.lineage = Some(recipe.inputs.join("+"));
    merged.extra.insert("base_id".into(), base.id.clone());
    let domains: BTreeSet<&str> = inputs.iter().filter_map(|c| c.domain.as_deref()).collect();
    if domains.len() == 1 {
        merged.domain = domains.iter().next().map(|s| s.to_string());
    }
    let phases: BTreeSet<&str> = inputs.iter().filter_map(|c| c.phase.as_deref()).collect();
    if phases.len() == 1 {
        merged.phase = phases.iter().next().map(|s| s.to_string());
    }
    // evaluation hyperparameters travel with the inputs when they agree
    let windows: BTreeSet<&String> = inputs
        .iter()
        .filter_map(|c| c.extra.get("history_window"))
        .collect();
    if windows.len() == 1 {
        merged.extra.insert(
            "history_window".into(),
            (*windows.iter().next().unwrap()).clone(),
        );
    }
    merged.validate()?;
    Ok(merged)
}

/// Embedding-table names the task-vector path will exclude, with pairwise
/// consistency checks.
fn excluded_names(base: &Checkpoint, inputs: &[Checkpoint]) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    for input in inputs {
        let tv = merge::task_vector(base, input)?;
        out.extend(tv.excluded);
    }
    Ok(out)
}

/// Merge one excluded embedding table across exactly two inputs: shared rows
/// by the recipe's method (relative to the base's copy when present),
/// expanded rows copied bit-exactly from their source.
fn merge_embedding_union(
    recipe: &MergeRecipe,
    base: &Checkpoint,
    name: &str,
    holders: &[&TensorEntry],
) -> Result<TensorEntry> {
    if holders.len() != 2 {
        return Err(Error::VocabUnion {
            name: name.into(),
            reason: format!(
                "vocabulary union is pairwise; tensor appears in {} inputs",
                holders.len()
            ),
        });
    }
    let (emb_i, emb_j) = (holders[0], holders[1]);
    let shared = shared_label_prefix(emb_i, emb_j);

    // Base rows for the shared block: where the base's labels agree with the
    // shared prefix its rows are used, missing rows are zeros. A neutral
    // union base has more rows than the shared prefix; only the prefix rows
    // participate.
    let cols = emb_i.shape.get(1).copied().unwrap_or(0);
    let mut base_block = vec![0.0f32; shared * cols];
    if shared > 0 {
        if let Some(bt) = base.tensor(name) {
            let labels = bt.row_labels.as_ref().ok_or_else(|| Error::VocabUnion {
                name: name.into(),
                reason: "base copy lacks row_labels".into(),
            })?;
            let il = emb_i
                .row_labels
                .as_ref()
                .expect("checked by vocab_union_merge");
            let overlap = labels.len().min(shared);
            if labels[..overlap] != il[..overlap] {
                return Err(Error::VocabUnion {
                    name: name.into(),
                    reason: "base vocabulary does not align with the shared rows".into(),
                });
            }
            base_block[..overlap * cols].copy_from_slice(&bt.data[..overlap * cols]);
        }
    }

    vocab_union_merge(emb_i, emb_j, shared, |u, v| {
        merge_shared_block(recipe, &base_block, u, v)
    })
}

/// Apply the recipe's method to one shared embedding block, treating the
/// block as a single-tensor checkpoint so trims and election behave exactly
/// as they do for full tensors.
fn merge_shared_block(recipe: &MergeRecipe, base_block: &[f32], u: &[f32], v: &[f32]) -> Vec<f32> {
    let n = base_block.len();
    let delta = |x: &[f32]| -> TaskVector {
        let d: Vec<f32> = x.iter().zip(base_block).map(|(a, b)| a - b).collect();
        TaskVector::from_entries(
            "shared_base",
            "shared_in",
            vec![TensorEntry::new("shared", vec![n], d).expect("block tensor")],
        )
    };
    let base_acc: Vec<f64> = if recipe.no_base_term {
        vec![0.0; n]
    } else {
        base_block.iter().map(|&v| f64::from(v)).collect()
    };
    let add = |acc: &mut [f64], tv: &TaskVector, w: f64| {
        for (a, &d) in acc.iter_mut().zip(&tv.tensor("shared").unwrap().data) {
            *a += w * f64::from(d);
        }
    };

    let trim_pair = |cfg: &TrimConfig, a: TaskVector, b: TaskVector| -> Vec<TaskVector> {
        cfg.trim_all(&[a, b])
            .expect("trim config already validated")
    };

    let mut acc = base_acc;
    match recipe.method {
        MergeMethod::Average => {
            return u
                .iter()
                .zip(v)
                .map(|(&x, &y)| ((f64::from(x) + f64::from(y)) / 2.0) as f32)
                .collect();
        }
        MergeMethod::Linear => {
            let w = recipe.weights.as_ref().expect("validated");
            add(&mut acc, &delta(u), w[0]);
            add(&mut acc, &delta(v), w[1]);
        }
        MergeMethod::Subspace => {
            let cfg = recipe.trim.as_ref().expect("validated");
            let trimmed = trim_pair(cfg, delta(u), delta(v));
            if cfg.ties_disjoint_mean {
                let du = &trimmed[0].tensor("shared").unwrap().data;
                let dv = &trimmed[1].tensor("shared").unwrap().data;
                for (i, a) in acc.iter_mut().enumerate() {
                    let live = (du[i] != 0.0) as u32 + (dv[i] != 0.0) as u32;
                    if live > 0 {
                        *a += (f64::from(du[i]) + f64::from(dv[i])) / f64::from(live);
                    }
                }
            } else {
                add(&mut acc, &trimmed[0], 0.5);
                add(&mut acc, &trimmed[1], 0.5);
            }
        }
        MergeMethod::AlphaPair => {
            let alpha = recipe.alpha.expect("validated");
            let (du, dv) = match recipe.trim.as_ref() {
                Some(cfg) => {
                    let trimmed = trim_pair(cfg, delta(u), delta(v));
                    (trimmed[0].clone(), trimmed[1].clone())
                }
                None => (delta(u), delta(v)),
            };
            add(&mut acc, &du, alpha);
            add(&mut acc, &dv, 1.0 - alpha);
        }
    }
    acc.into_iter().map(|x| x as f32).collect()
}
