//! Recommendation metrics, user-group evaluation, and relative-change
//! reports for merged vs. single-context checkpoints.
//!
//! Evaluation is leave-one-target over the test window: for each test event
//! the model scores candidate items given the user's preceding history, and
//! Recall@K / NDCG@K record where the true item ranked. Score ties break by
//! item id so ranks are platform-independent.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::InteractionLog;
use crate::tensor_store::Checkpoint;
use crate::trainer::ToyModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    All,
    Active,
    Nonactive,
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Group::All => write!(f, "all"),
            Group::Active => write!(f, "active"),
            Group::Nonactive => write!(f, "nonactive"),
        }
    }
}

impl FromStr for Group {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Group::All),
            "active" => Ok(Group::Active),
            "nonactive" => Ok(Group::Nonactive),
            other => Err(Error::InvalidConfig(format!(
                "unknown group {other:?} (expected all, active, or nonactive)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Recall,
    Ndcg,
}

/// Which metric picks winners: `recall@K` or `ndcg@K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionMetric {
    pub kind: MetricKind,
    pub k: usize,
}

impl Default for SelectionMetric {
    fn default() -> Self {
        SelectionMetric {
            kind: MetricKind::Ndcg,
            k: 10,
        }
    }
}

impl fmt::Display for SelectionMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            MetricKind::Recall => write!(f, "recall@{}", self.k),
            MetricKind::Ndcg => write!(f, "ndcg@{}", self.k),
        }
    }
}

impl FromStr for SelectionMetric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::InvalidConfig(format!(
                "bad selection metric {s:?} (expected e.g. ndcg@10)"
            ))
        };
        let (name, k) = s.split_once('@').ok_or_else(bad)?;
        let k: usize = k.parse().map_err(|_| bad())?;
        let kind = match name {
            "recall" | "r" => MetricKind::Recall,
            "ndcg" | "n" => MetricKind::Ndcg,
            _ => return Err(bad()),
        };
        Ok(SelectionMetric { kind, k })
    }
}

/// Recall@K and NDCG@K for one user group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub group: Group,
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    /// Events scored (including misses where the target fell outside top-K).
    pub n_evaluated: usize,
    /// Events dropped for lack of usable history.
    pub skipped: usize,
}

impl MetricRecord {
    pub fn empty(group: Group) -> Self {
        MetricRecord {
            group,
            recall: BTreeMap::new(),
            ndcg: BTreeMap::new(),
            n_evaluated: 0,
            skipped: 0,
        }
    }

    pub fn value(&self, sel: &SelectionMetric) -> Option<f64> {
        match sel.kind {
            MetricKind::Recall => self.recall.get(&sel.k).copied(),
            MetricKind::Ndcg => self.ndcg.get(&sel.k).copied(),
        }
    }

    /// Bounds and monotonicity-in-K checks; every record leaving `evaluate`
    /// passes through here.
    pub fn validate(&self) -> Result<()> {
        for (label, map) in [("recall", &self.recall), ("ndcg", &self.ndcg)] {
            let mut prev = 0.0f64;
            for (&k, &v) in map {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Eval(format!("{label}@{k} = {v} outside [0, 1]")));
                }
                if v + 1e-12 < prev {
                    return Err(Error::Eval(format!(
                        "{label}@{k} = {v} decreased below {prev}"
                    )));
                }
                prev = v;
            }
        }
        Ok(())
    }
}

/// Partition test-window users into those with and without at least one
/// interaction during the incremental window [t1, t2).
pub fn group_split(log: &InteractionLog) -> (BTreeSet<String>, BTreeSet<String>) {
    let p2_users = log.users_active_in_p2();
    let mut active = BTreeSet::new();
    let mut nonactive = BTreeSet::new();
    for user in log.test_window_users() {
        if p2_users.contains(&user) {
            active.insert(user);
        } else {
            nonactive.insert(user);
        }
    }
    (active, nonactive)
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    pub group: Group,
    /// Override the history window stored in the checkpoint.
    pub history_window: Option<usize>,
    /// Evaluate only each user's last test event.
    pub per_user_last: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            ks: vec![10, 20],
            group: Group::All,
            history_window: None,
            per_user_last: false,
        }
    }
}

/// Leave-one-target evaluation of a checkpoint over the log's test window.
///
/// Candidates are the log's items that exist in the model vocabulary, minus
/// the items in the user's history window (the target stays in). Targets
/// missing from the vocabulary count as misses; events with no usable
/// history are skipped and tallied.
pub fn evaluate(
    ckpt: &Checkpoint,
    log: &InteractionLog,
    opts: &EvalOptions,
) -> Result<MetricRecord> {
    if opts.ks.is_empty() {
        return Err(Error::InvalidConfig("no K values requested".into()));
    }
    let mut ks = opts.ks.clone();
    ks.sort_unstable();
    ks.dedup();

    let model = ToyModel::from_checkpoint(ckpt)?;
    let window = opts.history_window.unwrap_or(model.history_window);

    let (active, nonactive) = group_split(log);
    let in_group = |user: &str| match opts.group {
        Group::All => true,
        Group::Active => active.contains(user),
        Group::Nonactive => nonactive.contains(user),
    };

    // candidate item rows present in both the log and the model vocabulary
    let mut corpus: Vec<usize> = log
        .item_first_seen
        .keys()
        .filter_map(|item| model.row_of(item))
        .collect();
    corpus.sort_unstable();

    // per-user event item lists in log order, with global indices
    let mut user_events: BTreeMap<&str, Vec<(usize, &str)>> = BTreeMap::new();
    for (idx, e) in log.events.iter().enumerate() {
        user_events.entry(&e.user).or_default().push((idx, &e.item));
    }

    let test_range = log.test_event_indices();
    let mut last_test_of_user: BTreeMap<&str, usize> = BTreeMap::new();
    if opts.per_user_last {
        for &idx in &test_range {
            last_test_of_user.insert(&log.events[idx].user, idx);
        }
    }

    let mut hit_sum: BTreeMap<usize, f64> = ks.iter().map(|&k| (k, 0.0)).collect();
    let mut gain_sum: BTreeMap<usize, f64> = ks.iter().map(|&k| (k, 0.0)).collect();
    let mut n_evaluated = 0usize;
    let mut skipped = 0usize;

    for &idx in &test_range {
        let event = &log.events[idx];
        if !in_group(&event.user) {
            continue;
        }
        if opts.per_user_last && last_test_of_user.get(event.user.as_str()) != Some(&idx) {
            continue;
        }
        let history_rows: Vec<usize> = user_events[event.user.as_str()]
            .iter()
            .take_while(|(i, _)| *i < idx)
            .map(|(_, item)| *item)
            .collect::<Vec<&str>>()
            .iter()
            .rev()
            .take(window)
            .rev()
            .filter_map(|item| model.row_of(item))
            .collect();
        if history_rows.is_empty() {
            skipped += 1;
            continue;
        }

        n_evaluated += 1;
        let Some(target_row) = model.row_of(&event.item) else {
            continue; // unseen item: a miss at every K
        };
        let history_set: BTreeSet<usize> = history_rows.iter().copied().collect();
        let user_vec = model.user_vector(&history_rows);
        let target_score = model.score(&user_vec, target_row);
        // rank = 1 + number of candidates strictly ahead (ties by item id)
        let mut rank = 1usize;
        for &row in &corpus {
            if row == target_row || (history_set.contains(&row) && row != target_row) {
                continue;
            }
            let s = model.score(&user_vec, row);
            if s > target_score
                || (s == target_score && model.label_of(row) < model.label_of(target_row))
            {
                rank += 1;
            }
        }
        for &k in &ks {
            if rank <= k {
                *hit_sum.get_mut(&k).unwrap() += 1.0;
                *gain_sum.get_mut(&k).unwrap() += 1.0 / ((rank as f64) + 1.0).log2();
            }
        }
    }

    let mut record = MetricRecord::empty(opts.group);
    record.n_evaluated = n_evaluated;
    record.skipped = skipped;
    let denom = if n_evaluated == 0 {
        1.0
    } else {
        n_evaluated as f64
    };
    for &k in &ks {
        record.recall.insert(k, hit_sum[&k] / denom);
        record.ndcg.insert(k, gain_sum[&k] / denom);
    }
    record.validate()?;
    Ok(record)
}

/// Percent change of the merged model against each domain's baseline on the
/// selection metric: `100 * (merged - baseline) / baseline`.
pub fn relative_report(
    merged: &BTreeMap<String, MetricRecord>,
    baselines: &BTreeMap<String, MetricRecord>,
    sel: &SelectionMetric,
) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for (domain, baseline) in baselines {
        let m = merged
            .get(domain)
            .ok_or_else(|| Error::Eval(format!("no merged record for domain {domain}")))?;
        let mv = m
            .value(sel)
            .ok_or_else(|| Error::Eval(format!("merged record for {domain} lacks {sel}")))?;
        let bv = baseline
            .value(sel)
            .ok_or_else(|| Error::Eval(format!("baseline record for {domain} lacks {sel}")))?;
        if bv == 0.0 {
            return Err(Error::Numeric(format!(
                "zero baseline {sel} for domain {domain}"
            )));
        }
        out.insert(domain.clone(), 100.0 * (mv - bv) / bv);
    }
    Ok(out)
}
