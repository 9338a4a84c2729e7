//! Run manifests: a JSON record of the configuration, seed and produced
//! artifacts of one command. Contains no timestamps or absolute paths, so a
//! rerun with the same inputs reproduces it byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Artifact path relative to the manifest's directory.
    pub path: String,
    pub sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Training epoch the artifact was taken at.
    #[serde(default)]
    pub epoch: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metrics: BTreeMap<String, f64>,
}

impl ManifestEntry {
    pub fn new(path: &str, bytes: &[u8]) -> Self {
        Self {
            path: path.to_string(),
            sha256: sha256_hex(bytes),
            subject: None,
            strategy: None,
            alpha: None,
            epoch: 0,
            metrics: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub command: String,
    pub seed: u64,
    /// Echo of the effective configuration.
    pub config: serde_json::Value,
    pub entries: Vec<ManifestEntry>,
    /// Per-epoch training losses, when the command trains.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub losses: Vec<f64>,
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            command: command.to_string(),
            seed,
            config,
            entries: Vec::new(),
            losses: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        fs::write(path, self.to_json())
    }

    pub fn read(path: &Path) -> std::io::Result<Self> {
        let text = fs::read_to_string(path)?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(std::io::Error::other)?;
        if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(std::io::Error::other(format!(
                "manifest schema version {} (supported: {MANIFEST_SCHEMA_VERSION})",
                manifest.schema_version
            )));
        }
        Ok(manifest)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn json_round_trip() {
        let mut m = Manifest::new("personalize", 3, serde_json::json!({"alpha": 0.4}));
        let mut e = ManifestEntry::new("snap/e5.ckpt", b"x");
        e.alpha = Some(0.4);
        e.epoch = 5;
        e.metrics.insert("acc".into(), 0.8125);
        m.entries.push(e);
        m.losses = vec![1.5, 1.25];
        let back: Manifest = serde_json::from_str(&m.to_json()).unwrap();
        assert_eq!(back, m);
    }
}
