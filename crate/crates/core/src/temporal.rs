//! Temporal preference-shift vectors, lambda interpolation and sweeps, and
//! the recency-regression lambda predictor with active-ratio blending.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{Group, MetricRecord, SelectionMetric};
use crate::merge::{self, TaskVector};
use crate::tensor_store::Checkpoint;

/// Sweeps accept lambda up to this bound unless wide extrapolation is
/// explicitly enabled.
pub const DEFAULT_LAMBDA_BOUND: f64 = 2.0;

/// The parameter delta induced by one incremental training phase, plus a
/// snapshot of the endpoint checkpoint so interpolation at lambda = 1 can
/// return it bit-exactly.
#[derive(Debug, Clone)]
pub struct TemporalShift {
    pub domain: String,
    pub t_from: String,
    pub t_to: String,
    pub tv: TaskVector,
    target: Checkpoint,
}

impl TemporalShift {
    pub fn target(&self) -> &Checkpoint {
        &self.target
    }
}

/// `theta_t2 - theta_t1` elementwise.
pub fn temporal_shift(theta_t1: &Checkpoint, theta_t2: &Checkpoint) -> Result<TemporalShift> {
    if let (Some(a), Some(b)) = (&theta_t1.domain, &theta_t2.domain) {
        if a != b {
            return Err(Error::InvalidConfig(format!(
                "temporal shift across domains {a} and {b}"
            )));
        }
    }
    let tv = merge::task_vector(theta_t1, theta_t2)?;
    Ok(TemporalShift {
        domain: theta_t1
            .domain
            .clone()
            .or_else(|| theta_t2.domain.clone())
            .unwrap_or_default(),
        t_from: theta_t1.phase.clone().unwrap_or_default(),
        t_to: theta_t2.phase.clone().unwrap_or_default(),
        tv,
        target: theta_t2.clone(),
    })
}

/// `theta_t1 + lambda * shift`. Lambda 0 and 1 short-circuit to the stored
/// endpoint checkpoints bit-exactly; lambda > 1 extrapolates past t2.
pub fn interpolate(
    theta_t1: &Checkpoint,
    shift: &TemporalShift,
    lambda: f64,
) -> Result<Checkpoint> {
    if !lambda.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "lambda must be finite, got {lambda}"
        )));
    }
    if lambda == 0.0 {
        return Ok(theta_t1.clone());
    }
    if lambda == 1.0 {
        return Ok(shift.target.clone());
    }
    let mut out = merge::apply(theta_t1, &shift.tv, lambda)?;
    out.id = format!("interp({},{},{lambda})", theta_t1.id, shift.target.id);
    out.lineage = Some(format!("{}+{}", theta_t1.id, shift.target.id));
    out.extra.insert("lambda".into(), lambda.to_string());
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct SweepOptions {
    pub selection: SelectionMetric,
    /// Permit lambda beyond [`DEFAULT_LAMBDA_BOUND`].
    #[serde(default)]
    pub allow_wide_extrapolation: bool,
}

/// Per-group metric trajectories over a lambda grid, with the per-group
/// argmax of the selection metric (ties resolved to the smallest lambda).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LambdaSweepResult {
    pub lambdas: Vec<f64>,
    pub selection_metric: String,
    /// group name -> one record per lambda, aligned with `lambdas`.
    pub metrics: BTreeMap<String, Vec<MetricRecord>>,
    pub argmax: BTreeMap<String, f64>,
}

/// Evaluate the interpolated checkpoint at every lambda for every group.
///
/// `evaluator` failures abort the sweep, reporting the offending lambda.
pub fn sweep_lambda<F>(
    theta_t1: &Checkpoint,
    shift: &TemporalShift,
    lambdas: &[f64],
    groups: &[Group],
    opts: &SweepOptions,
    mut evaluator: F,
) -> Result<LambdaSweepResult>
where
    F: FnMut(&Checkpoint, Group) -> Result<MetricRecord>,
{
    if lambdas.is_empty() {
        return Err(Error::InvalidConfig("lambda grid is empty".into()));
    }
    if lambdas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig(
            "lambda grid must be strictly increasing".into(),
        ));
    }
    if !opts.allow_wide_extrapolation {
        if let Some(&l) = lambdas.iter().find(|&&l| l.abs() > DEFAULT_LAMBDA_BOUND) {
            return Err(Error::InvalidConfig(format!(
                "lambda {l} exceeds the {DEFAULT_LAMBDA_BOUND} extrapolation bound; pass the wide-extrapolation flag to allow it"
            )));
        }
    }

    let mut metrics: BTreeMap<String, Vec<MetricRecord>> = BTreeMap::new();
    for &lambda in lambdas {
        let ckpt = interpolate(theta_t1, shift, lambda).map_err(|e| Error::SweepEval {
            lambda,
            source: Box::new(e),
        })?;
        for &group in groups {
            let record = evaluator(&ckpt, group).map_err(|e| Error::SweepEval {
                lambda,
                source: Box::new(e),
            })?;
            metrics.entry(group.to_string()).or_default().push(record);
        }
    }

    let mut argmax = BTreeMap::new();
    for (group, records) in &metrics {
        let mut best: Option<(f64, f64)> = None; // (lambda, value)
        for (&lambda, record) in lambdas.iter().zip(records) {
            let value = record.value(&opts.selection).ok_or_else(|| {
                Error::Eval(format!(
                    "record lacks the selection metric {}",
                    opts.selection
                ))
            })?;
            let better = match best {
                None => true,
                Some((_, v)) => value > v,
            };
            if better {
                best = Some((lambda, value));
            }
        }
        argmax.insert(group.clone(), best.expect("grid non-empty").0);
    }

    Ok(LambdaSweepResult {
        lambdas: lambdas.to_vec(),
        selection_metric: opts.selection.to_string(),
        metrics,
        argmax,
    })
}

/// Parse a lambda grid: either `start:end:step` (inclusive end) or a comma
/// list. Values are snapped to micro-units so the grid prints cleanly.
pub fn parse_lambda_grid(text: &str) -> Result<Vec<f64>> {
    let bad = |reason: String| Error::InvalidConfig(format!("lambda grid {text:?}: {reason}"));
    let parse = |s: &str| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .map_err(|_| bad(format!("{s:?} is not a number")))
    };
    if text.contains(':') {
        let parts: Vec<&str> = text.split(':').collect();
        if parts.len() != 3 {
            return Err(bad("expected start:end:step".into()));
        }
        let (start, end, step) = (parse(parts[0])?, parse(parts[1])?, parse(parts[2])?);
        if step <= 0.0 {
            return Err(bad("step must be positive".into()));
        }
        let to_micro = |v: f64| (v * 1e6).round() as i64;
        let (s, e, st) = (to_micro(start), to_micro(end), to_micro(step));
        if st == 0 {
            return Err(bad("step is below 1e-6 resolution".into()));
        }
        let mut out = Vec::new();
        let mut v = s;
        while v <= e {
            out.push(v as f64 / 1e6);
            v += st;
        }
        if out.is_empty() {
            return Err(bad("empty grid".into()));
        }
        Ok(out)
    } else {
        let vals: Vec<f64> = text.split(',').map(parse).collect::<Result<_>>()?;
        if vals.is_empty() {
            return Err(bad("empty grid".into()));
        }
        Ok(vals)
    }
}

/// Closed-form ordinary least squares fit of `y = intercept + slope * x`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub residuals: Vec<f64>,
}

impl LinearFit {
    pub fn predict(&self, x: f64) -> f64 {
        self.intercept + self.slope * x
    }

    pub fn residual_sum_of_squares(&self) -> f64 {
        self.residuals.iter().map(|r| r * r).sum()
    }
}

/// Fit (gap_days, lambda_star) points by ordinary least squares.
pub fn fit_lambda_regressor(points: &[(f64, f64)]) -> Result<LinearFit> {
    if points.len() < 2 {
        return Err(Error::DegenerateRegression(format!(
            "need at least 2 points, got {}",
            points.len()
        )));
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mean_x) * (p.0 - mean_x)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    if sxx == 0.0 {
        return Err(Error::DegenerateRegression("all x values are equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let residuals = points
        .iter()
        .map(|&(x, y)| y - (intercept + slope * x))
        .collect();
    Ok(LinearFit {
        slope,
        intercept,
        residuals,
    })
}

/// Per-domain summary feeding the lambda predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainStats {
    pub domain: String,
    pub n_users: usize,
    pub n_active: usize,
    pub n_nonactive: usize,
    /// Ratio of active users among test-window users.
    pub p_active: f64,
    /// Mean (interaction time - item first-seen time) over training events,
    /// in days.
    pub avg_gap_days: f64,
    /// Observed optimal lambda for non-active users, filled by a sweep.
    #[serde(default)]
    pub lambda_star_nonactive: Option<f64>,
}

impl DomainStats {
    pub fn validate(&self) -> Result<()> {
        if self.n_active + self.n_nonactive != self.n_users {
            return Err(Error::InvalidConfig(format!(
                "domain {}: active {} + nonactive {} != users {}",
                self.domain, self.n_active, self.n_nonactive, self.n_users
            )));
        }
        if !(0.0..=1.0).contains(&self.p_active) {
            return Err(Error::InvalidConfig(format!(
                "domain {}: p_active {} outside [0, 1]",
                self.domain, self.p_active
            )));
        }
        if self.avg_gap_days < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "domain {}: negative avg_gap_days {}",
                self.domain, self.avg_gap_days
            )));
        }
        Ok(())
    }
}

/// For each domain, fit the regressor on the other domains' (gap, lambda*)
/// pairs and evaluate at this domain's gap.
pub fn loo_predict(stats: &[DomainStats]) -> Result<BTreeMap<String, f64>> {
    let mut populated: Vec<&DomainStats> = stats
        .iter()
        .filter(|s| s.lambda_star_nonactive.is_some())
        .collect();
    // canonical fold order, so predictions are bit-identical under any
    // input permutation
    populated.sort_by(|a, b| a.domain.cmp(&b.domain));
    if populated.len() < 3 {
        return Err(Error::DegenerateRegression(format!(
            "leave-one-out needs at least 3 domains with lambda_star, got {}",
            populated.len()
        )));
    }
    let mut out = BTreeMap::new();
    for (i, held_out) in populated.iter().enumerate() {
        let train: Vec<(f64, f64)> = populated
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, s)| (s.avg_gap_days, s.lambda_star_nonactive.unwrap()))
            .collect();
        let fit = fit_lambda_regressor(&train)?;
        out.insert(held_out.domain.clone(), fit.predict(held_out.avg_gap_days));
    }
    Ok(out)
}

/// Convex blend of the predicted non-active lambda toward 1, weighted by the
/// active-user ratio.
pub fn blend_lambda(lambda_star_pred: f64, p_active: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p_active) {
        return Err(Error::InvalidConfig(format!(
            "p_active {p_active} outside [0, 1]"
        )));
    }
    Ok((1.0 - p_active) * lambda_star_pred + p_active)
}

/// The six published (domain, gap_days, lambda_star, p_active) rows used by
/// fixtures and the CLI self-test.
pub fn recency_fixture() -> Vec<DomainStats> {
    let rows = [
        ("Hea", 662.9, 0.715, 0.394, 113_393, 44_725, 68_668),
        ("Spo", 563.9, 0.700, 0.449, 34_571, 15_525, 19_046),
        ("Mov", 520.8, 0.985, 0.348, 5_289, 1_839, 3_450),
        ("Vid", 418.2, 1.050, 0.452, 4_876, 2_202, 2_674),
        ("Boo", 336.6, 1.090, 0.458, 38_418, 17_589, 20_829),
        ("Cel", 362.0, 1.165, 0.399, 39_262, 15_647, 23_615),
    ];
    rows.iter()
        .map(|&(d, gap, l, p, users, active, nonactive)| DomainStats {
            domain: d.into(),
            n_users: users,
            n_active: active,
            n_nonactive: nonactive,
            p_active: p,
            avg_gap_days: gap,
            lambda_star_nonactive: Some(l),
        })
        .collect()
}
