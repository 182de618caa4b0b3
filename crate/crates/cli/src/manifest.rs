//! Per-stage artifact manifest.
//!
//! Every stage records a hash of its effective configuration, the hashes
//! of the artifacts it read, and the hashes of the artifacts it wrote.
//! A stage whose configuration hash and input hashes match the recorded
//! entry — and whose outputs are still on disk with the recorded hashes —
//! is skipped as up to date, which makes reruns of a finished pipeline
//! no-ops and catches hand-edited artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// One stage's provenance record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageEntry {
    /// SHA-256 of the canonical JSON of (stage name, effective config).
    pub config_hash: String,
    /// Artifact file name → SHA-256 of its bytes, for everything read.
    pub inputs: BTreeMap<String, String>,
    /// Artifact file name → SHA-256 of its bytes, for everything written.
    pub outputs: BTreeMap<String, String>,
    pub tool_version: String,
    pub unix_time: u64,
}

/// All recorded stages, keyed by stage name.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: BTreeMap<String, StageEntry>,
}

impl Manifest {
    /// Read the manifest from `dir`, or start fresh when none exists.
    pub fn load(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Manifest::default());
        }
        let text = fs::read_to_string(&path)?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("corrupt {}: {e}", path.display())))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest is plain data");
        fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    /// True when `name`'s recorded entry matches the given config hash and
    /// input hashes and all recorded outputs are intact on disk.
    pub fn is_up_to_date(
        &self,
        dir: &Path,
        name: &str,
        config_hash: &str,
        inputs: &BTreeMap<String, String>,
    ) -> bool {
        let Some(entry) = self.stages.get(name) else {
            return false;
        };
        if entry.config_hash != config_hash || &entry.inputs != inputs {
            return false;
        }
        entry.outputs.iter().all(|(file, hash)| {
            let path = dir.join(file);
            path.exists() && hash_file(&path).map(|h| &h == hash).unwrap_or(false)
        })
    }

    /// Record (or replace) a completed stage.
    pub fn record(
        &mut self,
        name: &str,
        config_hash: String,
        inputs: BTreeMap<String, String>,
        outputs: BTreeMap<String, String>,
    ) {
        let unix_time = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        self.stages.insert(
            name.to_string(),
            StageEntry {
                config_hash,
                inputs,
                outputs,
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                unix_time,
            },
        );
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

pub fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Canonical configuration hash for one stage: SHA-256 over the JSON of
/// `{"stage": name, "config": cfg}` (struct field order is fixed, so the
/// serialization is deterministic).
pub fn config_hash<T: Serialize>(name: &str, cfg: &T) -> String {
    let value = serde_json::json!({ "stage": name, "config": cfg });
    sha256_hex(
        serde_json::to_string(&value)
            .expect("configs are plain data")
            .as_bytes(),
    )
}
