//! Versioned desk-scale fixtures: recorded provider transcripts, pool
//! slices, and golden trajectories, all pinned by SHA-256 checksums.
//!
//! A bundle is a directory with a `manifest.json` listing every asset and
//! its digest, plus an optional golden-run spec. Verification re-hashes
//! each file and, for golden runs, replays the recorded transcript through
//! the discovery runner and compares the produced trajectory and metrics
//! byte-for-byte against the stored ones — no network involved.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::harness::{
    build_providers, load_pool, run_discovery_experiment, HarnessError, RunConfig,
};

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error("io: {0}")]
    Io(String),
    #[error("manifest is malformed: {0}")]
    BadManifest(String),
    #[error(transparent)]
    Harness(#[from] HarnessError),
}

impl From<std::io::Error> for FixtureError {
    fn from(e: std::io::Error) -> Self {
        FixtureError::Io(e.to_string())
    }
}

/// Golden-run pointers inside a bundle (paths relative to the bundle root).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GoldenSpec {
    pub config: String,
    pub pool: String,
    pub transcript: String,
    pub trajectory: String,
    pub metrics: String,
}

/// Manifest: asset digests plus the optional golden-run spec.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BundleManifest {
    pub name: String,
    /// Relative path -> SHA-256 hex digest.
    pub files: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub golden: Option<GoldenSpec>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex::encode(hasher.finalize())
}

pub fn sha256_file(path: &Path) -> Result<String, FixtureError> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Build and write a manifest over the given relative paths.
pub fn write_manifest(
    root: &Path,
    name: &str,
    files: &[&str],
    golden: Option<GoldenSpec>,
) -> Result<BundleManifest, FixtureError> {
    let mut digests = BTreeMap::new();
    for rel in files {
        digests.insert(rel.to_string(), sha256_file(&root.join(rel))?);
    }
    let manifest = BundleManifest {
        name: name.to_string(),
        files: digests,
        golden,
    };
    std::fs::write(
        root.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n",
    )?;
    Ok(manifest)
}

/// Result of verifying one bundle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BundleReport {
    pub name: String,
    pub files_checked: usize,
    /// Relative paths whose digest did not match.
    pub checksum_failures: Vec<String>,
    /// Whether the golden trajectory re-derived byte-identically in replay
    /// mode; `None` when the bundle has no golden spec.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub golden_trajectory_ok: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub golden_metrics_ok: Option<bool>,
}

impl BundleReport {
    pub fn passed(&self) -> bool {
        self.checksum_failures.is_empty()
            && self.golden_trajectory_ok.unwrap_or(true)
            && self.golden_metrics_ok.unwrap_or(true)
    }
}

/// Verify a bundle: every checksum must match (mismatches name the file),
/// and the golden trajectory must re-derive byte-identically by replaying
/// the recorded transcript.
pub fn verify_bundle(root: &Path) -> Result<BundleReport, FixtureError> {
    let manifest_text = std::fs::read_to_string(root.join("manifest.json"))?;
    let manifest: BundleManifest = serde_json::from_str(&manifest_text)
        .map_err(|e| FixtureError::BadManifest(e.to_string()))?;
    let mut failures = Vec::new();
    for (rel, expected) in &manifest.files {
        let path = root.join(rel);
        match sha256_file(&path) {
            Ok(actual) if &actual == expected => {}
            _ => failures.push(rel.clone()),
        }
    }
    let (mut golden_traj, mut golden_metrics) = (None, None);
    if let Some(golden) = &manifest.golden {
        let (traj_bytes, metrics_bytes) = rerun_golden(root, golden)?;
        let stored_traj = std::fs::read(root.join(&golden.trajectory))?;
        let stored_metrics = std::fs::read(root.join(&golden.metrics))?;
        golden_traj = Some(traj_bytes.into_bytes() == stored_traj);
        golden_metrics = Some(metrics_bytes.into_bytes() == stored_metrics);
    }
    Ok(BundleReport {
        name: manifest.name,
        files_checked: manifest.files.len(),
        checksum_failures: failures,
        golden_trajectory_ok: golden_traj,
        golden_metrics_ok: golden_metrics,
    })
}

/// Re-run the golden discovery experiment in replay mode and return the
/// serialized trajectory JSONL and metrics JSON.
pub fn rerun_golden(root: &Path, golden: &GoldenSpec) -> Result<(String, String), FixtureError> {
    let config_text = std::fs::read_to_string(root.join(&golden.config))?;
    let mut config = RunConfig::from_toml(&config_text)?;
    config.provider_mode = crate::harness::ProviderMode::Replay;
    config.transcript_path = Some(root.join(&golden.transcript));
    let mut providers = build_providers(&config)?;
    let encoder = crate::transfer::EncoderSpec::raw(config.embed_dim);
    let pool = load_pool(&root.join(&golden.pool), &mut providers, &encoder)?;
    let gp = config.discovery_gp()?;
    let (trajectory, metrics) = run_discovery_experiment(&config, &pool, &gp, &mut providers)?;
    let metrics_json = serde_json::to_string_pretty(&metrics).expect("metrics serialize") + "\n";
    Ok((trajectory.to_jsonl(), metrics_json))
}

/// Path of a bundle shipped with the crate.
pub fn bundled(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name)
}
