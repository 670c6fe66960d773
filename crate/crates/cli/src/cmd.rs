//! Subcommand implementations. Each handler prints one JSON document to
//! stdout on success; progress notes go to stderr.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mergegrid_core::eval::{self, EvalOptions, Group, MetricRecord, SelectionMetric};
use mergegrid_core::grid::{self, BaseStrategy, GridCell, GridManifest};
use mergegrid_core::merge::{l1_norm, task_vector, MergeRecipe};
use mergegrid_core::pipeline::{self, ExperimentSpec};
use mergegrid_core::recipe::execute_recipe;
use mergegrid_core::synth::{self, Boundaries, InteractionLog, SynthConfig};
use mergegrid_core::temporal::{
    blend_lambda, loo_predict, parse_lambda_grid, sweep_lambda, temporal_shift, DomainStats,
    SweepOptions,
};
use mergegrid_core::tensor_store;
use mergegrid_core::trainer::{self, Stage, ToyModelSpec};

use crate::{EvalArgs, TemporalSweepArgs, TrainArgs};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(mergegrid_core::Error),
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    Json {
        path: PathBuf,
        reason: String,
    },
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io { path, source } => write!(f, "io error on {}: {source}", path.display()),
            CliError::Json { path, reason } => {
                write!(f, "bad JSON in {}: {reason}", path.display())
            }
        }
    }
}

impl From<mergegrid_core::Error> for CliError {
    fn from(e: mergegrid_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    /// Exit code: 1 usage, 2 data/validation, 3 numeric failure.
    pub fn code(&self) -> u8 {
        use mergegrid_core::ErrorClass;
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) => match e.class() {
                ErrorClass::Usage => 1,
                ErrorClass::Data => 2,
                ErrorClass::Numeric => 3,
            },
            CliError::Io { .. } | CliError::Json { .. } => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|source| CliError::Io {
        path: path.into(),
        source,
    })?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Json {
        path: path.into(),
        reason: e.to_string(),
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|source| CliError::Io {
        path: path.into(),
        source,
    })
}

fn emit(value: &serde_json::Value) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("json serializes")
    );
}

fn parse_boundaries(text: Option<&str>) -> Result<Boundaries> {
    let Some(text) = text else {
        let b = synth::default_boundaries();
        eprintln!(
            "using default boundaries t0={} t1={} t2={} test_end={}",
            b.t0, b.t1, b.t2, b.test_end
        );
        return Ok(b);
    };
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 4 {
        return Err(CliError::Usage(format!(
            "--boundaries expects t0,t1,t2,test_end, got {text:?}"
        )));
    }
    let mut vals = [0i64; 4];
    for (slot, part) in vals.iter_mut().zip(&parts) {
        *slot = part
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("bad boundary timestamp {part:?}")))?;
    }
    let b = Boundaries {
        t0: vals[0],
        t1: vals[1],
        t2: vals[2],
        test_end: vals[3],
    };
    b.validate()?;
    Ok(b)
}

fn parse_ks(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Usage(format!("bad K value {s:?}")))
        })
        .collect()
}

fn load_log(path: &Path, boundaries: Boundaries) -> Result<InteractionLog> {
    let (log, report) = synth::ingest(path, boundaries)?;
    if report.duplicates_dropped > 0 || report.outside_window > 0 {
        eprintln!(
            "ingested {} events ({} duplicates dropped, {} outside all windows)",
            report.total, report.duplicates_dropped, report.outside_window
        );
    }
    Ok(log)
}

pub fn inspect(path: &Path) -> Result<()> {
    let ckpt = tensor_store::load(path)?;
    emit(&tensor_store::inspect_json(&ckpt));
    Ok(())
}

pub fn merge(recipe_path: &Path, grid_path: &Path, out: &Path, no_base_term: bool) -> Result<()> {
    let mut recipe: MergeRecipe = read_json(recipe_path)?;
    if no_base_term {
        recipe.no_base_term = true;
    }
    let manifest = GridManifest::load(grid_path)?;
    let merged = execute_recipe(&recipe, &manifest)?;
    tensor_store::save(&merged, out)?;
    eprintln!("wrote {}", out.display());
    emit(&serde_json::json!({
        "out": out,
        "output_id": merged.id,
        "lineage": merged.lineage,
        "tensors": merged.tensors().len(),
    }));
    Ok(())
}

pub fn norms(ckpt_path: &Path, base_path: &Path, out: Option<&Path>) -> Result<()> {
    let base = tensor_store::load(base_path)?;
    let target = tensor_store::load(ckpt_path)?;
    let tv = task_vector(&base, &target)?;
    let (per_tensor, total) = l1_norm(&tv);
    let mut csv = String::from("tensor,name,l1\n");
    for (name, value) in &per_tensor {
        csv.push_str(&format!("tensor,{name},{value}\n"));
    }
    csv.push_str(&format!("total,,{total}\n"));
    match out {
        Some(path) => {
            write_file(path, csv.as_bytes())?;
            emit(&serde_json::json!({ "out": path, "total_l1": total }));
        }
        None => print!("{csv}"),
    }
    Ok(())
}

pub fn grid_register(
    manifest_path: &Path,
    ckpt: &Path,
    domain: Option<String>,
    phase: Option<String>,
    as_base: bool,
    force: bool,
) -> Result<()> {
    let mut manifest = if manifest_path.exists() {
        GridManifest::load(manifest_path)?
    } else {
        GridManifest {
            root: manifest_path
                .parent()
                .unwrap_or(Path::new("."))
                .to_path_buf(),
            ..Default::default()
        }
    };
    if as_base {
        let dir = manifest_path
            .parent()
            .unwrap_or(Path::new("."))
            .to_path_buf();
        manifest.set_pretrained_base(&dir, ckpt)?;
    } else {
        let (Some(domain), Some(phase)) = (domain.as_deref(), phase.as_deref()) else {
            return Err(CliError::Usage(
                "--domain and --phase are required unless --as-base is given".into(),
            ));
        };
        grid::register(&mut manifest, domain, phase, ckpt, force)?;
    }
    manifest.save(manifest_path)?;
    emit(&serde_json::json!({
        "manifest": manifest_path,
        "entries": manifest.entries.len(),
        "has_base": manifest.pretrained_base.is_some(),
    }));
    Ok(())
}

pub fn grid_ls(manifest_path: &Path) -> Result<()> {
    let manifest = GridManifest::load(manifest_path)?;
    emit(&serde_json::to_value(&manifest).expect("manifest serializes"));
    Ok(())
}

pub fn grid_resolve(
    manifest_path: &Path,
    kind: &str,
    domain: Option<String>,
    phase: Option<String>,
    members: Option<String>,
    out: &Path,
) -> Result<()> {
    let manifest = GridManifest::load(manifest_path)?;
    let strategy = match kind {
        "pretrained" => BaseStrategy::Pretrained,
        "historical" => {
            let (Some(domain), Some(phase)) = (domain, phase) else {
                return Err(CliError::Usage(
                    "historical base needs --domain and --phase".into(),
                ));
            };
            BaseStrategy::Historical { domain, phase }
        }
        "neutral" => {
            let Some(members) = members else {
                return Err(CliError::Usage(
                    "neutral base needs --members domain:phase,domain:phase".into(),
                ));
            };
            let cells = members
                .split(',')
                .map(|pair| {
                    pair.split_once(':')
                        .map(|(d, p)| GridCell::new(d.trim(), p.trim()))
                        .ok_or_else(|| {
                            CliError::Usage(format!("bad member {pair:?}, expected domain:phase"))
                        })
                })
                .collect::<Result<Vec<_>>>()?;
            BaseStrategy::Neutral { members: cells }
        }
        other => {
            return Err(CliError::Usage(format!(
                "unknown base kind {other:?} (expected pretrained, historical, or neutral)"
            )))
        }
    };
    let resolved = grid::resolve_base(&manifest, &strategy)?;
    tensor_store::save(&resolved, out)?;
    emit(&serde_json::json!({ "out": out, "id": resolved.id }));
    Ok(())
}

pub fn temporal_sweep(args: &TemporalSweepArgs) -> Result<()> {
    let t1 = tensor_store::load(&args.t1)?;
    let t2 = tensor_store::load(&args.t2)?;
    let shift = temporal_shift(&t1, &t2)?;
    let lambdas = parse_lambda_grid(&args.lambdas)?;
    let boundaries = parse_boundaries(args.boundaries.as_deref())?;
    let log = load_log(&args.log, boundaries)?;
    let groups = args
        .groups
        .split(',')
        .map(|g| g.trim().parse::<Group>().map_err(CliError::Core))
        .collect::<Result<Vec<_>>>()?;
    let selection: SelectionMetric = args.selection.parse()?;
    let ks = parse_ks(&args.ks)?;
    let opts = SweepOptions {
        selection,
        allow_wide_extrapolation: args.allow_wide_extrapolation,
    };
    let result = sweep_lambda(&t1, &shift, &lambdas, &groups, &opts, |ckpt, group| {
        eval::evaluate(
            ckpt,
            &log,
            &EvalOptions {
                ks: ks.clone(),
                group,
                ..Default::default()
            },
        )
    })?;
    let mut bytes = serde_json::to_vec_pretty(&result).expect("sweep serializes");
    bytes.push(b'\n');
    write_file(&args.out, &bytes)?;
    eprintln!(
        "swept {} lambdas over {} groups",
        lambdas.len(),
        groups.len()
    );
    emit(&serde_json::json!({
        "out": args.out,
        "argmax": result.argmax,
        "selection_metric": result.selection_metric,
    }));
    Ok(())
}

pub fn predict_lambda(stats_path: &Path, out: Option<&Path>) -> Result<()> {
    let text = std::fs::read_to_string(stats_path).map_err(|source| CliError::Io {
        path: stats_path.into(),
        source,
    })?;
    let mut stats: Vec<DomainStats> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line.starts_with("domain,")) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(CliError::Usage(format!(
                "{}:{}: expected domain,avg_gap_days,lambda_star,p_active",
                stats_path.display(),
                lineno + 1
            )));
        }
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.parse().map_err(|_| {
                CliError::Usage(format!(
                    "{}:{}: bad {what} {s:?}",
                    stats_path.display(),
                    lineno + 1
                ))
            })
        };
        stats.push(DomainStats {
            domain: fields[0].to_string(),
            n_users: 0,
            n_active: 0,
            n_nonactive: 0,
            p_active: parse(fields[3], "p_active")?,
            avg_gap_days: parse(fields[1], "avg_gap_days")?,
            lambda_star_nonactive: Some(parse(fields[2], "lambda_star")?),
        });
    }
    let predictions = loo_predict(&stats)?;
    let mut csv = String::from("domain,lambda_pred,lambda_blend\n");
    for s in &stats {
        let pred = predictions[&s.domain];
        let blend = blend_lambda(pred, s.p_active)?;
        csv.push_str(&format!("{},{pred},{blend}\n", s.domain));
    }
    match out {
        Some(path) => {
            write_file(path, csv.as_bytes())?;
            emit(&serde_json::json!({ "out": path, "predictions": predictions }));
        }
        None => print!("{csv}"),
    }
    Ok(())
}

pub fn synth_gen(config_path: &Path, out: &Path) -> Result<()> {
    let config: SynthConfig = read_json(config_path)?;
    let log = synth::generate(&config)?;
    synth::write_events_jsonl(&log, out)?;
    eprintln!(
        "generated {} events for domain {}",
        log.events.len(),
        config.domain_name
    );
    emit(&serde_json::json!({
        "out": out,
        "domain": config.domain_name,
        "events": log.events.len(),
        "items": log.item_first_seen.len(),
        "boundaries": log.boundaries,
    }));
    Ok(())
}

pub fn synth_train(args: &TrainArgs) -> Result<()> {
    let boundaries = parse_boundaries(args.boundaries.as_deref())?;
    let mut log = load_log(&args.log, boundaries)?;
    if args.domain.is_some() {
        log.domain = args.domain.clone();
    }
    let stage: Stage = args.stage.parse()?;
    let init = args.init.as_ref().map(tensor_store::load).transpose()?;
    let spec = ToyModelSpec {
        latent_dim: args.latent_dim,
        history_window: args.history_window,
        learning_rate: args.learning_rate,
        epochs_pretrain: args.epochs_pretrain,
        epochs_incremental: args.epochs_incremental,
        negatives_per_step: args.negatives,
        full_softmax: args.full_softmax,
        seed: args.seed,
    };
    let ckpt = trainer::train(&log, &spec, stage, init.as_ref())?;
    tensor_store::save(&ckpt, &args.out)?;
    emit(&serde_json::json!({
        "out": args.out,
        "id": ckpt.id,
        "phase": ckpt.phase,
        "lineage": ckpt.lineage,
        "items": log.item_first_seen.len(),
    }));
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let ckpt = tensor_store::load(&args.ckpt)?;
    let boundaries = parse_boundaries(args.boundaries.as_deref())?;
    let log = load_log(&args.log, boundaries)?;
    let opts = EvalOptions {
        ks: parse_ks(&args.ks)?,
        group: args.group.parse()?,
        history_window: None,
        per_user_last: args.per_user_last,
    };
    let record = eval::evaluate(&ckpt, &log, &opts)?;
    let value = serde_json::to_value(&record).expect("record serializes");
    if let Some(path) = &args.out {
        let mut bytes = serde_json::to_vec_pretty(&record).expect("record serializes");
        bytes.push(b'\n');
        write_file(path, &bytes)?;
    }
    emit(&value);
    Ok(())
}

pub fn report(merged_path: &Path, baseline_path: &Path, out: &Path, selection: &str) -> Result<()> {
    let merged: BTreeMap<String, MetricRecord> = read_json(merged_path)?;
    let baselines: BTreeMap<String, MetricRecord> = read_json(baseline_path)?;
    let sel: SelectionMetric = selection.parse()?;
    let report = eval::relative_report(&merged, &baselines, &sel)?;
    let csv = pipeline::heat_csv(&report, &baselines, &merged, &sel);
    write_file(out, csv.as_bytes())?;
    emit(&serde_json::json!({ "out": out, "report": report, "selection_metric": sel.to_string() }));
    Ok(())
}

pub fn pipeline(experiment: &Path, out_dir: &Path) -> Result<()> {
    let spec = ExperimentSpec::load(experiment)?;
    eprintln!(
        "running pipeline: {} domains, seed {}, out {}",
        spec.domains.len(),
        spec.seed,
        out_dir.display()
    );
    let summary = pipeline::run(&spec, out_dir)?;
    emit(&serde_json::to_value(&summary).expect("summary serializes"));
    Ok(())
}
