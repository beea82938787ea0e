//! Run manifests: a TOML inventory of everything a run wrote, stamped with
//! the config fingerprint and toolkit version so artifacts can be audited
//! without re-reading them. The manifest is written atomically (temp file
//! plus rename), so it either exists in full or not at all.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    /// Fingerprint of the config that produced the artifacts; changes
    /// exactly when a behavior-relevant config field changes.
    pub fingerprint: String,
    pub toolkit_version: String,
    pub started: String,
    pub finished: String,
    pub artifacts: Vec<ArtifactRecord>,
}

/// One artifact, stored relative to the manifest's directory.
#[derive(Debug, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub path: String,
    pub bytes: u64,
}

pub fn utc_timestamp() -> String {
    chrono::Utc::now().to_rfc3339()
}

/// Collect size records for `paths`, each relative to `root`.
pub fn inventory(root: &Path, paths: &[&Path]) -> Result<Vec<ArtifactRecord>> {
    let mut records = Vec::with_capacity(paths.len());
    for path in paths {
        let metadata = fs::metadata(path)
            .with_context(|| format!("cannot stat artifact '{}'", path.display()))?;
        let relative = path.strip_prefix(root).unwrap_or(path);
        records.push(ArtifactRecord {
            path: relative.to_string_lossy().into_owned(),
            bytes: metadata.len(),
        });
    }
    Ok(records)
}

pub fn write_manifest(manifest: &RunManifest, path: &Path) -> Result<()> {
    let text = toml::to_string_pretty(manifest).context("cannot serialize manifest")?;
    let tmp = path.with_extension("toml.tmp");
    fs::write(&tmp, text).with_context(|| format!("cannot write '{}'", tmp.display()))?;
    fs::rename(&tmp, path)
        .with_context(|| format!("cannot move manifest into place at '{}'", path.display()))?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read manifest '{}'", path.display()))?;
    toml::from_str(&text).with_context(|| format!("cannot parse manifest '{}'", path.display()))
}

/// Merge fresh artifact records into an existing manifest, replacing any
/// earlier record with the same path. Later subcommands (eval, sample,
/// compose) use this to keep the run's inventory complete.
pub fn record_artifacts(manifest_path: &Path, root: &Path, paths: &[&Path]) -> Result<()> {
    let mut manifest = read_manifest(manifest_path)?;
    for record in inventory(root, paths)? {
        manifest.artifacts.retain(|existing| existing.path != record.path);
        manifest.artifacts.push(record);
    }
    write_manifest(&manifest, manifest_path)
}
