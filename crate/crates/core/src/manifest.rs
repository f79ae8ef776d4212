//! Run manifest: the master seed, a frozen config snapshot, and every
//! artifact a run produced.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::FlatConfig;
use crate::error::{Error, Result};
use crate::lifelong::LabConfig;
use crate::rng::fnv1a;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub master_seed: u64,
    /// Flat `section.key -> value` snapshot, fixed at creation.
    pub config: BTreeMap<String, String>,
    /// Artifact name to path relative to the run directory.
    pub artifacts: BTreeMap<String, PathBuf>,
    /// Completed phases.
    pub phases: BTreeMap<String, bool>,
}

impl RunManifest {
    pub fn new(cfg: &LabConfig, master_seed: u64) -> Self {
        let config: BTreeMap<String, String> = cfg.to_pairs().into_iter().collect();
        let digest = fnv1a(cfg.to_flat_string().as_bytes());
        Self {
            run_id: format!("run-{master_seed}-{:08x}", digest as u32),
            master_seed,
            config,
            artifacts: BTreeMap::new(),
            phases: BTreeMap::new(),
        }
    }

    /// Rebuilds the config the run was created with.
    pub fn lab_config(&self) -> Result<LabConfig> {
        let mut cfg = LabConfig::default();
        for (k, v) in &self.config {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn path(dir: &Path) -> PathBuf {
        dir.join(MANIFEST_FILE)
    }

    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let p = Self::path(dir);
        if !p.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_str(&std::fs::read_to_string(p)?)?))
    }

    /// Loads the manifest in `dir` or creates one. An existing manifest must
    /// agree on seed and config, since its snapshot never changes.
    pub fn open_or_create(dir: &Path, cfg: &LabConfig, master_seed: u64) -> Result<Self> {
        let fresh = Self::new(cfg, master_seed);
        match Self::load(dir)? {
            Some(m) if m.master_seed != master_seed => Err(Error::Config(format!(
                "{} was created with seed {}, not {master_seed}",
                Self::path(dir).display(),
                m.master_seed
            ))),
            Some(m) if m.config != fresh.config => {
                let changed: Vec<&String> = fresh
                    .config
                    .iter()
                    .filter(|(k, v)| m.config.get(*k) != Some(v))
                    .map(|(k, _)| k)
                    .collect();
                Err(Error::Config(format!(
                    "{} has a different config snapshot (changed: {changed:?}); use a new output directory",
                    Self::path(dir).display()
                )))
            }
            Some(m) => Ok(m),
            None => {
                std::fs::create_dir_all(dir)?;
                fresh.save(dir)?;
                Ok(fresh)
            }
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::write(Self::path(dir), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Records an artifact. Each path belongs to exactly one name.
    pub fn add_artifact(&mut self, name: &str, path: &Path) {
        self.artifacts.retain(|n, p| n == name || p != path);
        self.artifacts.insert(name.to_string(), path.to_path_buf());
    }

    pub fn complete(&mut self, phase: &str) {
        self.phases.insert(phase.to_string(), true);
    }
}
