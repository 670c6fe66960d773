//! End-to-end experiment runner: generate synthetic logs, train a
//! domains-by-phases checkpoint grid from a shared random base, run a
//! cross-domain merge, evaluate against single-domain baselines, and sweep
//! the temporal interpolation coefficient.
//!
//! Every artifact lands under one output directory and every byte is a pure
//! function of the experiment file, so runs with the same seed reproduce
//! identical files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::counter_rng::fnv1a64;
use crate::error::{Error, Result};
use crate::eval::{evaluate, relative_report, EvalOptions, Group, MetricRecord, SelectionMetric};
use crate::grid::{register, BaseStrategy, GridManifest};
use crate::merge::{MergeMethod, MergeRecipe, TrimConfig};
use crate::recipe::execute_recipe;
use crate::synth::{compute_stats, generate, write_events_jsonl, InteractionLog, SynthConfig};
use crate::temporal::{
    parse_lambda_grid, sweep_lambda, temporal_shift, DomainStats, LambdaSweepResult, SweepOptions,
};
use crate::tensor_store::{save, Checkpoint, TensorEntry};
use crate::trainer::{train, Stage, ToyModelSpec, ITEM_EMBEDDINGS, TRANSFORM_MATRIX};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeStep {
    pub method: MergeMethod,
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub trim: Option<TrimConfig>,
    #[serde(default)]
    pub base: BaseStrategy,
    #[serde(default)]
    pub no_base_term: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepStep {
    /// Domain whose t1 -> t2 lane is swept.
    pub domain: String,
    /// Grid spec: `start:end:step` or a comma list.
    pub lambdas: String,
    #[serde(default)]
    pub selection: Option<String>,
    #[serde(default)]
    pub allow_wide_extrapolation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    /// Master seed; per-domain generator and trainer seeds derive from it.
    pub seed: u64,
    pub domains: Vec<SynthConfig>,
    pub model: ToyModelSpec,
    pub merge: MergeStep,
    pub sweep: SweepStep,
    #[serde(default = "default_ks")]
    pub ks: Vec<usize>,
}

fn default_ks() -> Vec<usize> {
    vec![10, 20]
}

impl ExperimentSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<ExperimentSpec> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| Error::Io {
            path: path.into(),
            source,
        })?;
        let spec: ExperimentSpec =
            serde_json::from_slice(&bytes).map_err(|e| Error::Malformed {
                path: path.into(),
                reason: format!("experiment file is not valid JSON: {e}"),
            })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(Error::InvalidConfig(
                "experiment needs at least one domain".into(),
            ));
        }
        for d in &self.domains {
            d.validate()?;
        }
        self.model.validate()?;
        if !self
            .domains
            .iter()
            .any(|d| d.domain_name == self.sweep.domain)
        {
            return Err(Error::InvalidConfig(format!(
                "sweep domain {} is not one of the experiment domains",
                self.sweep.domain
            )));
        }
        if self.ks.is_empty() {
            return Err(Error::InvalidConfig("ks must be non-empty".into()));
        }
        Ok(())
    }
}

/// Trained lane for one domain: its log, stats, and t0/t1/t2 checkpoints.
pub struct DomainArtifacts {
    pub config: SynthConfig,
    pub log: InteractionLog,
    pub stats: DomainStats,
    pub t0: Checkpoint,
    pub t1: Checkpoint,
    pub t2: Checkpoint,
}

/// Shared random-init base checkpoint: a fully random transform (each
/// domain must learn its own mapping, keeping base-strategy differences
/// observable) plus embedding rows for the domain-neutral shared vocabulary
/// when one exists.
pub fn shared_base_checkpoint(seed: u64, dim: usize, shared_labels: &[String]) -> Checkpoint {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(b"base"));
    let w: Vec<f32> = (0..dim * dim).map(|_| rng.gen_range(-0.4..0.4)).collect();
    let mut ckpt = Checkpoint::new("base");
    ckpt.phase = Some("t0".into());
    ckpt.seed = Some(seed);
    ckpt.insert(TensorEntry::new(TRANSFORM_MATRIX, vec![dim, dim], w).expect("transform tensor"))
        .expect("fresh checkpoint");
    if !shared_labels.is_empty() {
        let scale = (1.0 / dim as f32).sqrt();
        let emb: Vec<f32> = (0..shared_labels.len() * dim)
            .map(|_| rng.gen_range(-scale..scale))
            .collect();
        ckpt.insert(
            TensorEntry::new(ITEM_EMBEDDINGS, vec![shared_labels.len(), dim], emb)
                .expect("embedding tensor")
                .with_row_labels(shared_labels.to_vec())
                .expect("labels match rows"),
        )
        .expect("fresh checkpoint");
    }
    ckpt
}

/// Labels of the domain-neutral shared vocabulary implied by the configs.
pub fn shared_vocabulary(domains: &[SynthConfig]) -> Vec<String> {
    let n = domains.iter().map(|d| d.shared_items).max().unwrap_or(0);
    (0..n).map(|i| format!("_common/i{i:04}")).collect()
}

/// Generate one domain's log and train its three checkpoints from the
/// shared base.
pub fn build_domain(
    config: &SynthConfig,
    model: &ToyModelSpec,
    seed: u64,
    base: &Checkpoint,
) -> Result<DomainArtifacts> {
    let mut config = config.clone();
    config.seed = config.seed.wrapping_add(seed);
    let mut model = *model;
    model.seed = model.seed.wrapping_add(seed);

    let log = generate(&config)?;
    let stats = compute_stats(&log)?;
    let t0 = train(&log, &model, Stage::Pretrain, Some(base))?;
    let t1 = train(&log, &model, Stage::P1, Some(&t0))?;
    let t2 = train(&log, &model, Stage::P2, Some(&t1))?;
    Ok(DomainArtifacts {
        config,
        log,
        stats,
        t0,
        t1,
        t2,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelineSummary {
    pub out_dir: PathBuf,
    pub grid_manifest: PathBuf,
    pub merged_checkpoint: PathBuf,
    pub sweep_file: PathBuf,
    pub heat_file: PathBuf,
    pub baseline_metrics: BTreeMap<String, MetricRecord>,
    pub merged_metrics: BTreeMap<String, MetricRecord>,
    /// Percent change of the merged model vs each baseline.
    pub report: BTreeMap<String, f64>,
    pub sweep_argmax: BTreeMap<String, f64>,
    pub stats: BTreeMap<String, DomainStats>,
}

fn write_pretty_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("value serializes");
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.into(),
        source,
    })
}

/// Render the relative report as `heat.csv`.
pub fn heat_csv(
    report: &BTreeMap<String, f64>,
    baselines: &BTreeMap<String, MetricRecord>,
    merged: &BTreeMap<String, MetricRecord>,
    sel: &SelectionMetric,
) -> String {
    let mut out = String::from("domain,metric,baseline,merged,change_pct\n");
    for (domain, change) in report {
        let b = baselines[domain].value(sel).unwrap_or(f64::NAN);
        let m = merged[domain].value(sel).unwrap_or(f64::NAN);
        out.push_str(&format!("{domain},{sel},{b},{m},{change}\n"));
    }
    out
}

/// Run the whole experiment, writing every artifact under `out_dir`.
pub fn run(spec: &ExperimentSpec, out_dir: &Path) -> Result<PipelineSummary> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|source| Error::Io {
        path: out_dir.into(),
        source,
    })?;
    let io = |path: &Path| {
        let p = path.to_path_buf();
        move |source| Error::Io {
            path: p.clone(),
            source,
        }
    };

    let shared_labels = shared_vocabulary(&spec.domains);
    let base = shared_base_checkpoint(spec.seed, spec.model.latent_dim, &shared_labels);
    let base_path = out_dir.join("base.mgt");
    save(&base, &base_path)?;

    let mut manifest = GridManifest::default();
    manifest.set_pretrained_base(out_dir, &base_path)?;

    let mut artifacts: BTreeMap<String, DomainArtifacts> = BTreeMap::new();
    for cfg in &spec.domains {
        let art = build_domain(cfg, &spec.model, spec.seed, &base)?;
        let domain = cfg.domain_name.clone();
        write_events_jsonl(&art.log, out_dir.join(format!("events_{domain}.jsonl")))?;
        for (ckpt, phase) in [(&art.t0, "t0"), (&art.t1, "t1"), (&art.t2, "t2")] {
            let path = out_dir.join(format!("{domain}_{phase}.mgt"));
            save(ckpt, &path)?;
            register(&mut manifest, &domain, phase, &path, false)?;
        }
        artifacts.insert(domain, art);
    }
    let grid_path = out_dir.join("grid.json");
    manifest.save(&grid_path)?;

    let stats: BTreeMap<String, DomainStats> = artifacts
        .iter()
        .map(|(d, a)| (d.clone(), a.stats.clone()))
        .collect();
    write_pretty_json(&stats, &out_dir.join("stats.json"))?;

    // single-domain baselines: each domain's own t2 on its own test window
    let eval_opts = EvalOptions {
        ks: spec.ks.clone(),
        ..Default::default()
    };
    let mut baselines = BTreeMap::new();
    for (domain, art) in &artifacts {
        baselines.insert(domain.clone(), evaluate(&art.t2, &art.log, &eval_opts)?);
    }
    write_pretty_json(&baselines, &out_dir.join("baselines.json"))?;

    // cross-domain merge of the t2 checkpoints
    let recipe = MergeRecipe {
        method: spec.merge.method,
        inputs: artifacts.values().map(|a| a.t2.id.clone()).collect(),
        weights: spec.merge.weights.clone(),
        alpha: spec.merge.alpha,
        trim: spec.merge.trim.clone(),
        base: spec.merge.base.clone(),
        output_id: "merged".into(),
        no_base_term: spec.merge.no_base_term,
    };
    let merged = execute_recipe(&recipe, &manifest)?;
    let merged_path = out_dir.join("merged.mgt");
    save(&merged, &merged_path)?;

    let mut merged_metrics = BTreeMap::new();
    for (domain, art) in &artifacts {
        merged_metrics.insert(domain.clone(), evaluate(&merged, &art.log, &eval_opts)?);
    }
    write_pretty_json(&merged_metrics, &out_dir.join("merged_metrics.json"))?;

    let sel: SelectionMetric = match &spec.sweep.selection {
        Some(s) => s.parse()?,
        None => SelectionMetric::default(),
    };
    let report = relative_report(&merged_metrics, &baselines, &sel)?;
    let heat_path = out_dir.join("heat.csv");
    std::fs::write(
        &heat_path,
        heat_csv(&report, &baselines, &merged_metrics, &sel),
    )
    .map_err(io(&heat_path))?;

    // temporal sweep on the configured domain's t1 -> t2 lane
    let sweep_art = &artifacts[&spec.sweep.domain];
    let shift = temporal_shift(&sweep_art.t1, &sweep_art.t2)?;
    let lambdas = parse_lambda_grid(&spec.sweep.lambdas)?;
    let sweep_opts = SweepOptions {
        selection: sel,
        allow_wide_extrapolation: spec.sweep.allow_wide_extrapolation,
    };
    let sweep = sweep_lambda(
        &sweep_art.t1,
        &shift,
        &lambdas,
        &[Group::All, Group::Active, Group::Nonactive],
        &sweep_opts,
        |ckpt, group| {
            evaluate(
                ckpt,
                &sweep_art.log,
                &EvalOptions {
                    ks: spec.ks.clone(),
                    group,
                    ..Default::default()
                },
            )
        },
    )?;
    let sweep_path = out_dir.join("sweep.json");
    write_pretty_json(&sweep, &sweep_path)?;

    Ok(PipelineSummary {
        out_dir: out_dir.to_path_buf(),
        grid_manifest: grid_path,
        merged_checkpoint: merged_path,
        sweep_file: sweep_path,
        heat_file: heat_path,
        baseline_metrics: baselines,
        merged_metrics,
        report,
        sweep_argmax: sweep.argmax.clone(),
        stats,
    })
}

/// Sweep the lambda lane of an already-built domain and return the result.
pub fn sweep_domain(
    art: &DomainArtifacts,
    lambdas: &[f64],
    ks: &[usize],
    opts: &SweepOptions,
) -> Result<LambdaSweepResult> {
    let shift = temporal_shift(&art.t1, &art.t2)?;
    sweep_lambda(
        &art.t1,
        &shift,
        lambdas,
        &[Group::All, Group::Active, Group::Nonactive],
        opts,
        |ckpt, group| {
            evaluate(
                ckpt,
                &art.log,
                &EvalOptions {
                    ks: ks.to_vec(),
                    group,
                    ..Default::default()
                },
            )
        },
    )
}
