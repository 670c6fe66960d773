//! Deterministic synthetic interaction generator with controllable temporal
//! drift and item recency, plus log ingestion and per-domain statistics.
//!
//! The timeline is split into four windows: pretrain (before t0), two
//! incremental phases P1 = [t0, t1) and P2 = [t1, t2), and a test window
//! [t2, test_end). Users drawn as "active" are the only ones interacting in
//! P2, and their latent preferences rotate by the configured drift angle in
//! P2 and again in the test window; everyone else keeps a static preference.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::counter_rng::fnv1a64;
use crate::error::{Error, Result};
use crate::temporal::DomainStats;

pub const SECONDS_PER_DAY: i64 = 86_400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Boundaries {
    pub t0: i64,
    pub t1: i64,
    pub t2: i64,
    pub test_end: i64,
}

impl Boundaries {
    pub fn validate(&self) -> Result<()> {
        if !(self.t0 < self.t1 && self.t1 < self.t2 && self.t2 < self.test_end) {
            return Err(Error::InvalidConfig(format!(
                "boundaries must be increasing: t0={} t1={} t2={} test_end={}",
                self.t0, self.t1, self.t2, self.test_end
            )));
        }
        Ok(())
    }

    pub fn window_of(&self, ts: i64) -> Window {
        if ts < self.t0 {
            Window::Pretrain
        } else if ts < self.t1 {
            Window::P1
        } else if ts < self.t2 {
            Window::P2
        } else if ts < self.test_end {
            Window::Test
        } else {
            Window::Outside
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    Pretrain,
    P1,
    P2,
    Test,
    Outside,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub user: String,
    pub item: String,
    pub ts: i64,
}

/// Timestamped (user, item) events with phase boundaries and first-seen
/// times. Events are kept sorted by (ts, user, item).
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionLog {
    pub domain: Option<String>,
    pub events: Vec<Event>,
    pub boundaries: Boundaries,
    /// First interaction timestamp per item (proxy for release date).
    pub item_first_seen: BTreeMap<String, i64>,
}

impl InteractionLog {
    pub fn from_events(
        mut events: Vec<Event>,
        boundaries: Boundaries,
        domain: Option<String>,
    ) -> Self {
        events.sort_by(|a, b| (a.ts, &a.user, &a.item).cmp(&(b.ts, &b.user, &b.item)));
        let mut first_seen = BTreeMap::new();
        for e in &events {
            first_seen.entry(e.item.clone()).or_insert(e.ts);
        }
        InteractionLog {
            domain,
            events,
            boundaries,
            item_first_seen: first_seen,
        }
    }

    /// Users with at least one interaction during [t1, t2).
    pub fn users_active_in_p2(&self) -> BTreeSet<String> {
        self.events
            .iter()
            .filter(|e| self.boundaries.window_of(e.ts) == Window::P2)
            .map(|e| e.user.clone())
            .collect()
    }

    pub fn test_window_users(&self) -> BTreeSet<String> {
        self.events
            .iter()
            .filter(|e| self.boundaries.window_of(e.ts) == Window::Test)
            .map(|e| e.user.clone())
            .collect()
    }

    /// Indices of test-window events, in log order.
    pub fn test_event_indices(&self) -> Vec<usize> {
        self.events
            .iter()
            .enumerate()
            .filter(|(_, e)| self.boundaries.window_of(e.ts) == Window::Test)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn window_events(&self, window: Window) -> impl Iterator<Item = &Event> {
        self.events
            .iter()
            .filter(move |e| self.boundaries.window_of(e.ts) == window)
    }

    pub fn count_in(&self, window: Window) -> usize {
        self.window_events(window).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventsPerPhase {
    pub pretrain: usize,
    pub p1: usize,
    pub p2: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub domain_name: String,
    pub n_users: usize,
    pub n_items: usize,
    pub latent_dim: usize,
    /// Rotation (radians) of each active user's latent preference toward a
    /// personal drift target, applied once in P2 and twice in the test
    /// window.
    pub drift_angle_per_phase: f64,
    /// Probability a user is drawn as active (interacts during [t1, t2)).
    pub active_prob: f64,
    /// Expected number of new items arriving per day after t = 0; higher
    /// rates shrink the average interaction time gap.
    pub item_arrival_rate: f64,
    pub events_per_phase: EventsPerPhase,
    pub seed: u64,
    /// The first `shared_items` items carry domain-neutral `_common/...`
    /// labels, modeling a vocabulary shared across domains (0 = disjoint
    /// vocabularies).
    #[serde(default)]
    pub shared_items: usize,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.n_items == 0 || self.latent_dim == 0 {
            return Err(Error::InvalidConfig("counts must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.active_prob) {
            return Err(Error::InvalidConfig(format!(
                "active_prob {} outside [0, 1]",
                self.active_prob
            )));
        }
        if self.item_arrival_rate < 0.0 {
            return Err(Error::InvalidConfig(
                "item_arrival_rate must be non-negative".into(),
            ));
        }
        if self.shared_items > self.n_items {
            return Err(Error::InvalidConfig(format!(
                "shared_items {} exceeds n_items {}",
                self.shared_items, self.n_items
            )));
        }
        Ok(())
    }
}

/// Default window layout: 360 pretrain days, 90-day P1/P2/test windows.
pub fn default_boundaries() -> Boundaries {
    Boundaries {
        t0: 360 * SECONDS_PER_DAY,
        t1: 450 * SECONDS_PER_DAY,
        t2: 540 * SECONDS_PER_DAY,
        test_end: 630 * SECONDS_PER_DAY,
    }
}

/// Rotate the unit vector `pref` by `angle` in the plane it spans with the
/// unit vector `trend`, clamped so it never overshoots the trend direction.
fn rotate_toward(pref: &[f64], trend: &[f64], angle: f64) -> Vec<f64> {
    if angle == 0.0 {
        return pref.to_vec();
    }
    let along = dot(pref, trend);
    let ortho: Vec<f64> = trend.iter().zip(pref).map(|(t, p)| t - along * p).collect();
    let ortho_norm = dot(&ortho, &ortho).sqrt();
    if ortho_norm < 1e-9 {
        return pref.to_vec(); // already aligned (or anti-aligned)
    }
    let angle = angle.min(along.clamp(-1.0, 1.0).acos());
    let (sin, cos) = angle.sin_cos();
    pref.iter()
        .zip(&ortho)
        .map(|(p, o)| cos * p + sin * o / ortho_norm)
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-6 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

/// Softmax temperature for preference-driven item choice.
const CHOICE_SHARPNESS: f64 = 4.0;

/// Generate a deterministic synthetic log for the config's seed.
pub fn generate(config: &SynthConfig) -> Result<InteractionLog> {
    config.validate()?;
    let boundaries = default_boundaries();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ fnv1a64(config.domain_name.as_bytes()));

    let user_prefs: Vec<Vec<f64>> = (0..config.n_users)
        .map(|_| random_unit(&mut rng, config.latent_dim))
        .collect();
    let item_latents: Vec<Vec<f64>> = (0..config.n_items)
        .map(|_| random_unit(&mut rng, config.latent_dim))
        .collect();
    // Each user's drift destination: a domain-wide trend blended with a
    // personal component, so drift shifts aggregate behavior while keeping
    // per-user spread.
    let common_trend = random_unit(&mut rng, config.latent_dim);
    let drift_targets: Vec<Vec<f64>> = (0..config.n_users)
        .map(|_| {
            let personal = random_unit(&mut rng, config.latent_dim);
            let mixed: Vec<f64> = common_trend
                .iter()
                .zip(&personal)
                .map(|(t, p)| t + p)
                .collect();
            let norm = mixed.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
            mixed.iter().map(|x| x / norm).collect()
        })
        .collect();
    let active: Vec<bool> = (0..config.n_users)
        .map(|_| rng.gen::<f64>() < config.active_prob)
        .collect();
    let active_users: Vec<usize> = (0..config.n_users).filter(|&u| active[u]).collect();

    // Item arrival: a core set exists at t = 0; the rest trickle in at the
    // configured daily rate, uniformly over the whole horizon.
    let horizon_days = boundaries.test_end / SECONDS_PER_DAY;
    let n_new = ((config.item_arrival_rate * horizon_days as f64).round() as usize)
        .min(config.n_items.saturating_sub(1));
    let arrivals: Vec<i64> = (0..config.n_items)
        .map(|i| {
            if i < config.n_items - n_new {
                0
            } else {
                rng.gen_range(1..boundaries.test_end)
            }
        })
        .collect();

    let user_id = |u: usize| format!("{}/u{u:04}", config.domain_name);
    let item_id = |i: usize| {
        if i < config.shared_items {
            // "_" sorts before alphanumerics, so shared labels form the
            // common prefix that vocabulary-union merging expects
            format!("_common/i{i:04}")
        } else {
            format!("{}/i{i:04}", config.domain_name)
        }
    };

    let windows = [
        (
            0i64,
            boundaries.t0,
            config.events_per_phase.pretrain,
            0u32,
            false,
        ),
        (
            boundaries.t0,
            boundaries.t1,
            config.events_per_phase.p1,
            0,
            false,
        ),
        (
            boundaries.t1,
            boundaries.t2,
            config.events_per_phase.p2,
            1,
            true,
        ),
        (
            boundaries.t2,
            boundaries.test_end,
            config.events_per_phase.test,
            2,
            false,
        ),
    ];

    let mut events = Vec::new();
    for (start, end, count, drift_steps, active_only) in windows {
        for _ in 0..count {
            let u = if active_only {
                if active_users.is_empty() {
                    break;
                }
                active_users[rng.gen_range(0..active_users.len())]
            } else {
                rng.gen_range(0..config.n_users)
            };
            let ts = rng.gen_range(start..end);
            let pref = if active[u] && drift_steps > 0 {
                rotate_toward(
                    &user_prefs[u],
                    &drift_targets[u],
                    config.drift_angle_per_phase * f64::from(drift_steps),
                )
            } else {
                user_prefs[u].clone()
            };
            // preference-softmax choice over items that have arrived by ts
            let mut weights = Vec::with_capacity(config.n_items);
            let mut total = 0.0f64;
            for i in 0..config.n_items {
                let w = if arrivals[i] <= ts {
                    (CHOICE_SHARPNESS * dot(&pref, &item_latents[i])).exp()
                } else {
                    0.0
                };
                total += w;
                weights.push(total);
            }
            let draw = rng.gen::<f64>() * total;
            let choice = weights
                .partition_point(|&w| w <= draw)
                .min(config.n_items - 1);
            events.push(Event {
                user: user_id(u),
                item: item_id(choice),
                ts,
            });
        }
    }

    Ok(InteractionLog::from_events(
        events,
        boundaries,
        Some(config.domain_name.clone()),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub total: usize,
    pub duplicates_dropped: usize,
    /// Events at or past test_end: retained but flagged.
    pub outside_window: usize,
}

#[derive(Deserialize)]
struct RawEvent {
    user: String,
    item: String,
    ts: i64,
}

/// Read an events file (JSONL `{"user","item","ts"}` or CSV `user,item,ts`),
/// sort it, and drop exact duplicate triples.
pub fn ingest(
    path: impl AsRef<Path>,
    boundaries: Boundaries,
) -> Result<(InteractionLog, IngestReport)> {
    let path = path.as_ref();
    boundaries.validate()?;
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.into(),
        source,
    })?;
    let as_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));

    let mut events = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_trim = line.trim();
        if line_trim.is_empty() {
            continue;
        }
        let parse_err = |reason: String| Error::Parse {
            path: path.into(),
            line: lineno + 1,
            reason,
        };
        if as_csv {
            if lineno == 0 && line_trim == "user,item,ts" {
                continue; // header
            }
            let mut parts = line_trim.split(',');
            let (user, item, ts) = (
                parts.next().unwrap_or("").trim(),
                parts.next().unwrap_or("").trim(),
                parts.next().unwrap_or("").trim(),
            );
            if parts.next().is_some() || user.is_empty() || item.is_empty() {
                return Err(parse_err("expected exactly user,item,ts".into()));
            }
            let ts: i64 = ts
                .parse()
                .map_err(|_| parse_err(format!("bad timestamp {ts:?}")))?;
            events.push(Event {
                user: user.into(),
                item: item.into(),
                ts,
            });
        } else {
            let raw: RawEvent =
                serde_json::from_str(line_trim).map_err(|e| parse_err(e.to_string()))?;
            events.push(Event {
                user: raw.user,
                item: raw.item,
                ts: raw.ts,
            });
        }
    }

    let total = events.len();
    let mut seen = BTreeSet::new();
    let mut deduped = Vec::with_capacity(events.len());
    for e in events {
        if seen.insert((e.user.clone(), e.item.clone(), e.ts)) {
            deduped.push(e);
        }
    }
    let duplicates_dropped = total - deduped.len();
    let log = InteractionLog::from_events(deduped, boundaries, None);
    let outside_window = log.count_in(Window::Outside);
    Ok((
        log,
        IngestReport {
            total,
            duplicates_dropped,
            outside_window,
        },
    ))
}

/// Write a log's events as JSONL.
pub fn write_events_jsonl(log: &InteractionLog, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for e in &log.events {
        out.push_str(&serde_json::to_string(e).expect("event serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|source| Error::Io {
        path: path.into(),
        source,
    })
}

/// Per-domain summary: user counts, active ratio over test-window users, and
/// the mean (interaction time - item first-seen time) over training events.
pub fn compute_stats(log: &InteractionLog) -> Result<DomainStats> {
    let mut gap_sum = 0.0f64;
    let mut gap_count = 0usize;
    for e in &log.events {
        if e.ts < log.boundaries.t2 {
            let first = log.item_first_seen[&e.item];
            gap_sum += (e.ts - first) as f64 / SECONDS_PER_DAY as f64;
            gap_count += 1;
        }
    }
    if gap_count == 0 {
        return Err(Error::Eval("no training events before t2".into()));
    }

    let test_users = log.test_window_users();
    let p2_users = log.users_active_in_p2();
    let n_users = test_users.len();
    let n_active = test_users.iter().filter(|u| p2_users.contains(*u)).count();
    let n_nonactive = n_users - n_active;
    let stats = DomainStats {
        domain: log.domain.clone().unwrap_or_default(),
        n_users,
        n_active,
        n_nonactive,
        p_active: if n_users == 0 {
            0.0
        } else {
            n_active as f64 / n_users as f64
        },
        avg_gap_days: gap_sum / gap_count as f64,
        lambda_star_nonactive: None,
    };
    stats.validate()?;
    Ok(stats)
}
