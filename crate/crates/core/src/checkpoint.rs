//! Checkpoint layout for training runs.
//!
//! A run directory holds one `manifest.toml` describing the run plus
//! per-stage weight files and optional optimizer state, so interrupted
//! training can resume and later stages can verify their prerequisites.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::VarStore;

/// Metadata stored alongside the weights of one training stage.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StageRecord {
    pub stage: u8,
    pub step: usize,
    pub completed: bool,
    /// Best validation value seen so far, used by early stopping.
    pub best_metric: Option<f64>,
}

/// The run manifest, serialized as `manifest.toml`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// Hex digest of the run configuration, to catch resuming a run
    /// directory with a different config.
    pub config_hash: String,
    pub profile: String,
    pub seed: u64,
    pub stages: Vec<StageRecord>,
}

impl Manifest {
    pub fn new(config_hash: String, profile: String, seed: u64) -> Self {
        Self {
            format_version: 1,
            config_hash,
            profile,
            seed,
            stages: Vec::new(),
        }
    }

    pub fn stage(&self, stage: u8) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.stage == stage)
    }

    pub fn stage_completed(&self, stage: u8) -> bool {
        self.stage(stage).map(|s| s.completed).unwrap_or(false)
    }

    pub fn upsert_stage(&mut self, record: StageRecord) {
        match self.stages.iter_mut().find(|s| s.stage == record.stage) {
            Some(slot) => *slot = record,
            None => self.stages.push(record),
        }
    }
}

/// SHA-256 hex digest of a configuration's serialized form.
pub fn config_hash(serialized: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serialized.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.toml")
}

pub fn weights_path(dir: &Path, stage: u8) -> PathBuf {
    dir.join(format!("stage{stage}.safetensors"))
}

pub fn optimizer_path(dir: &Path, stage: u8) -> PathBuf {
    dir.join(format!("stage{stage}.opt.bin"))
}

pub fn codebook_path(dir: &Path) -> PathBuf {
    dir.join("codebook.cbk")
}

pub fn save_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let text = toml::to_string_pretty(manifest)
        .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
    std::fs::write(manifest_path(dir), text)?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = manifest_path(dir);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::State(format!("no manifest at {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Format(format!("manifest parse: {e}")))
}

/// Writes one stage's weights and marks progress in the manifest.
pub fn save_stage(
    dir: &Path,
    manifest: &mut Manifest,
    record: StageRecord,
    vs: &VarStore,
    optimizer_state: Option<&[u8]>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    vs.save(&weights_path(dir, record.stage))?;
    match optimizer_state {
        Some(bytes) => std::fs::write(optimizer_path(dir, record.stage), bytes)?,
        None => {
            let _ = std::fs::remove_file(optimizer_path(dir, record.stage));
        }
    }
    manifest.upsert_stage(record);
    save_manifest(dir, manifest)
}

/// Loads one stage's weights into `vs`. Errors if the stage was never
/// saved or the manifest's config hash disagrees with `expected_hash`.
pub fn load_stage(
    dir: &Path,
    stage: u8,
    expected_hash: Option<&str>,
    vs: &mut VarStore,
) -> Result<Manifest> {
    let manifest = load_manifest(dir)?;
    if let Some(hash) = expected_hash {
        if manifest.config_hash != hash {
            return Err(Error::State(format!(
                "run directory {} was created with a different configuration",
                dir.display()
            )));
        }
    }
    if manifest.stage(stage).is_none() {
        return Err(Error::State(format!(
            "stage {stage} has no checkpoint in {}",
            dir.display()
        )));
    }
    vs.load(&weights_path(dir, stage))?;
    Ok(manifest)
}

pub fn load_optimizer_state(dir: &Path, stage: u8) -> Result<Option<Vec<u8>>> {
    let path = optimizer_path(dir, stage);
    if path.exists() {
        Ok(Some(std::fs::read(path)?))
    } else {
        Ok(None)
    }
}
