//! Run manifests: what was run, with which resolved configuration, and the
//! sha256 of every artifact it wrote.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::commands::Invocation;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub command: String,
    pub seed: u64,
    /// Fully resolved invocation; enough to run the command again.
    pub invocation: Invocation,
    pub inputs: Vec<PathBuf>,
    pub out_dir: PathBuf,
    /// Artifact file names relative to `out_dir`, in write order.
    pub outputs: Vec<String>,
    pub duration_secs: f64,
    pub checksums: BTreeMap<String, String>,
    /// Command-specific results (final loss, headline metrics, ...).
    pub summary: serde_json::Value,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::input(path, e.into()))?;
        serde_json::from_str(&text).map_err(|e| Error::input(path, e.into()))
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Executes `invocation` into `out_dir` and writes its manifest there.
pub fn run_recorded(invocation: &Invocation, out_dir: &Path) -> Result<RunManifest> {
    std::fs::create_dir_all(out_dir)?;
    let start = Instant::now();
    let outcome = invocation.execute(out_dir)?;
    let duration_secs = start.elapsed().as_secs_f64();
    let mut checksums = BTreeMap::new();
    for name in &outcome.artifacts {
        checksums.insert(name.clone(), sha256_file(&out_dir.join(name))?);
    }
    let manifest = RunManifest {
        tool: format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
        command: invocation.name().to_string(),
        seed: invocation.seed(),
        invocation: invocation.clone(),
        inputs: invocation.inputs(),
        out_dir: out_dir.to_path_buf(),
        outputs: outcome.artifacts,
        duration_secs,
        checksums,
        summary: outcome.summary,
    };
    manifest.save(out_dir)?;
    log::info!(
        "{}: wrote {} artifacts to {} in {:.2}s",
        manifest.command,
        manifest.outputs.len(),
        out_dir.display(),
        duration_secs
    );
    Ok(manifest)
}

/// Re-runs the command recorded in a manifest into `out_dir` and checks
/// that every artifact hashes to the recorded value.
pub fn replay(manifest_path: &Path, out_dir: &Path) -> Result<RunManifest> {
    let original = RunManifest::load(manifest_path)?;
    let rerun = run_recorded(&original.invocation, out_dir)?;
    for (name, expected) in &original.checksums {
        let got = rerun
            .checksums
            .get(name)
            .cloned()
            .unwrap_or_else(|| "<missing>".into());
        if &got != expected {
            return Err(Error::ChecksumMismatch {
                artifact: name.clone(),
                expected: expected.clone(),
                got,
            });
        }
    }
    if rerun.checksums.len() != original.checksums.len() {
        return Err(Error::Invariant(format!(
            "replay wrote {} artifacts, manifest lists {}",
            rerun.checksums.len(),
            original.checksums.len()
        )));
    }
    Ok(rerun)
}
