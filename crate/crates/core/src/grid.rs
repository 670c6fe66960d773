//! The contextual checkpoint grid: a registry of checkpoints indexed by
//! (domain, phase) with lineage tracking and base-strategy resolution.
//!
//! The manifest is a JSON document stored next to the checkpoint files with
//! relative paths, so a grid directory can be relocated wholesale.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::merge::average_merge;
use crate::tensor_store::{self, Checkpoint};

/// One (domain, phase) coordinate.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridCell {
    pub domain: String,
    pub phase: String,
}

impl GridCell {
    pub fn new(domain: impl Into<String>, phase: impl Into<String>) -> Self {
        GridCell {
            domain: domain.into(),
            phase: phase.into(),
        }
    }
}

impl std::fmt::Display for GridCell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {})", self.domain, self.phase)
    }
}

/// Where the task-vector base comes from: the registered pretrained model,
/// one historical grid cell, or the average of several same-phase cells.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaseStrategy {
    #[default]
    Pretrained,
    Historical {
        domain: String,
        phase: String,
    },
    Neutral {
        members: Vec<GridCell>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridEntry {
    pub domain: String,
    pub phase: String,
    /// Path relative to the manifest file.
    pub path: PathBuf,
    pub id: String,
    #[serde(default)]
    pub lineage: Option<String>,
    #[serde(default)]
    pub paradigm: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaseRef {
    pub path: PathBuf,
    pub id: String,
}

fn default_phase_order() -> Vec<String> {
    vec!["t0".into(), "t1".into(), "t2".into()]
}

/// The on-disk grid registry. At most one entry per (domain, phase); every
/// lineage id must resolve to another entry or the pretrained base.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridManifest {
    #[serde(default)]
    pub pretrained_base: Option<BaseRef>,
    /// Ordered phase labels; defaults to t0 < t1 < t2.
    #[serde(default = "default_phase_order")]
    pub phase_order: Vec<String>,
    #[serde(default)]
    pub entries: Vec<GridEntry>,
    /// Directory the relative paths resolve against; set on load/save.
    #[serde(skip)]
    pub root: PathBuf,
}

impl Default for GridManifest {
    fn default() -> Self {
        GridManifest {
            pretrained_base: None,
            phase_order: default_phase_order(),
            entries: Vec::new(),
            root: PathBuf::from("."),
        }
    }
}

impl GridManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<GridManifest> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| Error::Io {
            path: path.into(),
            source,
        })?;
        let mut manifest: GridManifest =
            serde_json::from_slice(&bytes).map_err(|e| Error::Malformed {
                path: path.into(),
                reason: format!("manifest is not valid JSON: {e}"),
            })?;
        manifest.root = path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .to_path_buf();
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.validate()?;
        let mut sorted = self.clone();
        sorted.sort_entries();
        let mut json = serde_json::to_vec_pretty(&sorted).expect("manifest serializes");
        json.push(b'\n');
        std::fs::write(path, json).map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }

    fn phase_index(&self, phase: &str) -> Option<usize> {
        self.phase_order.iter().position(|p| p == phase)
    }

    /// True when `a` precedes `b` in the manifest's phase order.
    pub fn phase_precedes(&self, a: &str, b: &str) -> bool {
        match (self.phase_index(a), self.phase_index(b)) {
            (Some(i), Some(j)) => i < j,
            _ => false,
        }
    }

    fn sort_entries(&mut self) {
        let order: BTreeMap<String, usize> = self
            .phase_order
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i))
            .collect();
        self.entries.sort_by(|a, b| {
            a.domain
                .cmp(&b.domain)
                .then_with(|| order.get(&a.phase).cmp(&order.get(&b.phase)))
                .then_with(|| a.phase.cmp(&b.phase))
        });
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeMap::new();
        for e in &self.entries {
            if self.phase_index(&e.phase).is_none() {
                return Err(Error::InvalidConfig(format!(
                    "entry ({}, {}) uses a phase outside the declared order {:?}",
                    e.domain, e.phase, self.phase_order
                )));
            }
            if seen
                .insert((e.domain.clone(), e.phase.clone()), ())
                .is_some()
            {
                return Err(Error::DuplicateCell {
                    domain: e.domain.clone(),
                    phase: e.phase.clone(),
                });
            }
        }
        let known: Vec<&str> = self
            .entries
            .iter()
            .map(|e| e.id.as_str())
            .chain(self.pretrained_base.iter().map(|b| b.id.as_str()))
            .collect();
        for e in &self.entries {
            if let Some(lineage) = &e.lineage {
                // merge outputs record multiple parents joined by '+'
                for parent in lineage.split('+') {
                    if !known.contains(&parent) {
                        return Err(Error::InvalidConfig(format!(
                            "entry ({}, {}) lineage {parent} does not resolve to a registered checkpoint",
                            e.domain, e.phase
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn entry(&self, domain: &str, phase: &str) -> Option<&GridEntry> {
        self.entries
            .iter()
            .find(|e| e.domain == domain && e.phase == phase)
    }

    fn entry_or_err(&self, domain: &str, phase: &str) -> Result<&GridEntry> {
        self.entry(domain, phase).ok_or_else(|| Error::MissingCell {
            domain: domain.into(),
            phase: phase.into(),
        })
    }

    pub fn resolve_path(&self, relative: &Path) -> PathBuf {
        if relative.is_absolute() {
            relative.to_path_buf()
        } else {
            self.root.join(relative)
        }
    }

    pub fn load_cell(&self, domain: &str, phase: &str) -> Result<Checkpoint> {
        let entry = self.entry_or_err(domain, phase)?;
        tensor_store::load(self.resolve_path(&entry.path))
    }

    /// Look a checkpoint up by id (grid entries first, then the base).
    pub fn load_by_id(&self, id: &str) -> Result<Checkpoint> {
        if let Some(e) = self.entries.iter().find(|e| e.id == id) {
            return tensor_store::load(self.resolve_path(&e.path));
        }
        if let Some(base) = &self.pretrained_base {
            if base.id == id {
                return tensor_store::load(self.resolve_path(&base.path));
            }
        }
        Err(Error::UnknownCheckpoint(id.into()))
    }

    pub fn set_pretrained_base(&mut self, manifest_dir: &Path, path: &Path) -> Result<()> {
        let ckpt = tensor_store::load(path)?;
        self.pretrained_base = Some(BaseRef {
            path: relativize(manifest_dir, path),
            id: ckpt.id,
        });
        self.root = manifest_dir.to_path_buf();
        Ok(())
    }
}

fn relativize(dir: &Path, path: &Path) -> PathBuf {
    path.strip_prefix(dir)
        .map(Path::to_path_buf)
        .unwrap_or_else(|_| path.to_path_buf())
}

/// Register a checkpoint at (domain, phase). The file must load cleanly; its
/// id, lineage, and paradigm are taken from the container metadata.
pub fn register(
    manifest: &mut GridManifest,
    domain: &str,
    phase: &str,
    path: &Path,
    force: bool,
) -> Result<()> {
    let ckpt = tensor_store::load(path)?;
    if manifest.entry(domain, phase).is_some() {
        if !force {
            return Err(Error::DuplicateCell {
                domain: domain.into(),
                phase: phase.into(),
            });
        }
        manifest
            .entries
            .retain(|e| !(e.domain == domain && e.phase == phase));
    }
    if manifest.phase_index(phase).is_none() {
        return Err(Error::InvalidConfig(format!(
            "phase {phase} is not in the declared order {:?}",
            manifest.phase_order
        )));
    }
    let root = manifest.root.clone();
    manifest.entries.push(GridEntry {
        domain: domain.into(),
        phase: phase.into(),
        path: relativize(&root, path),
        id: ckpt.id,
        lineage: ckpt.lineage,
        paradigm: ckpt.paradigm,
    });
    manifest.sort_entries();
    manifest.validate()
}

/// Materialize the checkpoint a base strategy names: the pretrained model,
/// one historical cell, or the average over the member cells.
pub fn resolve_base(manifest: &GridManifest, strategy: &BaseStrategy) -> Result<Checkpoint> {
    match strategy {
        BaseStrategy::Pretrained => {
            let base = manifest
                .pretrained_base
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("manifest has no pretrained base".into()))?;
            tensor_store::load(manifest.resolve_path(&base.path))
        }
        BaseStrategy::Historical { domain, phase } => manifest.load_cell(domain, phase),
        BaseStrategy::Neutral { members } => {
            if members.is_empty() {
                return Err(Error::InvalidConfig(
                    "neutral base needs at least one member".into(),
                ));
            }
            let loaded: Vec<Checkpoint> = members
                .iter()
                .map(|c| manifest.load_cell(&c.domain, &c.phase))
                .collect::<Result<_>>()?;
            let refs: Vec<&Checkpoint> = loaded.iter().collect();
            average_merge(&refs)
        }
    }
}
