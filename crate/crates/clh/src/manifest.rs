//! Run manifests: what produced an artifact.
//!
//! The manifest hash covers the engine version, the configuration, the input
//! digests and the command, but not the timestamps, so two runs over the
//! same inputs carry the same hash.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::EngineConfig;
use crate::io::{file_digest, IoError};

pub const MANIFEST_SCHEMA: &str = "clh.manifest/1";
pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub engine_version: String,
    pub config_hash: String,
    /// Input name to SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    pub command: String,
    pub started_at: u64,
    pub finished_at: u64,
    pub hash: String,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn begin(command: &str, config: &EngineConfig) -> Self {
        let mut m = Self {
            schema: MANIFEST_SCHEMA.into(),
            engine_version: ENGINE_VERSION.into(),
            config_hash: clh_core::content_hash(&config.snapshot()),
            inputs: BTreeMap::new(),
            command: command.into(),
            started_at: unix_now(),
            finished_at: 0,
            hash: String::new(),
        };
        m.rehash();
        m
    }

    /// Records the digest of an input file under `name`.
    pub fn add_input(&mut self, name: &str, path: &Path) -> Result<(), IoError> {
        self.inputs.insert(name.into(), file_digest(path)?);
        self.rehash();
        Ok(())
    }

    pub fn finish(&mut self) {
        self.finished_at = unix_now();
    }

    pub fn compute_hash(&self) -> String {
        let mut h = Sha256::new();
        for part in [
            MANIFEST_SCHEMA,
            &self.engine_version,
            &self.config_hash,
            &self.command,
        ] {
            h.update(part.as_bytes());
            h.update([0]);
        }
        for (name, digest) in &self.inputs {
            h.update(name.as_bytes());
            h.update([0]);
            h.update(digest.as_bytes());
            h.update([0]);
        }
        hex::encode(h.finalize())
    }

    fn rehash(&mut self) {
        self.hash = self.compute_hash();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_timestamps_but_not_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.jsonl");
        std::fs::write(&p, "x\n").unwrap();
        let config = EngineConfig::default();
        let mut a = RunManifest::begin("run", &config);
        a.add_input("notes", &p).unwrap();
        let mut b = a.clone();
        b.started_at += 100;
        b.finish();
        assert_eq!(a.compute_hash(), b.compute_hash());
        assert_eq!(a.hash, a.compute_hash());

        std::fs::write(&p, "y\n").unwrap();
        b.add_input("notes", &p).unwrap();
        assert_ne!(a.hash, b.hash);

        let mut other = config.clone();
        other.retrieval.k = 5;
        assert_ne!(RunManifest::begin("run", &other).config_hash, a.config_hash);
    }
}
