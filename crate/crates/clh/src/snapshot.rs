//! Index snapshots: one JSON file holding the built retrieval index, with a
//! format header and the embedder that produced its vectors.

use std::path::Path;

use clh_core::retrieval::TermIndex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{EmbedderKind, EmbedderSettings};
use crate::io::{read_json, write_json, IoError};

pub const SNAPSHOT_FORMAT: &str = "clh.index/1";

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{path}: unsupported snapshot format `{found}` (expected `{SNAPSHOT_FORMAT}`)")]
    Format { path: String, found: String },
    #[error(
        "snapshot was built with embedder {built}, but the configured embedder is {configured}"
    )]
    EmbedderMismatch { built: String, configured: String },
}

/// Enough of the embedder configuration to tell whether query vectors will
/// be comparable with the stored ones.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedderSpec {
    pub kind: EmbedderKind,
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
}

impl EmbedderSpec {
    pub fn of(settings: &EmbedderSettings) -> Self {
        match settings.kind {
            EmbedderKind::Hash => Self {
                kind: EmbedderKind::Hash,
                dim: settings.dim,
                seed: Some(settings.seed),
                model: None,
            },
            EmbedderKind::Http => Self {
                kind: EmbedderKind::Http,
                dim: settings.dim,
                seed: None,
                model: Some(settings.model.clone()),
            },
        }
    }
}

impl std::fmt::Display for EmbedderSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}(dim={}", self.kind, self.dim)?;
        if let Some(s) = self.seed {
            write!(f, ", seed={s:#x}")?;
        }
        if let Some(m) = &self.model {
            write!(f, ", model={m}")?;
        }
        write!(f, ")")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndexSnapshot {
    pub format: String,
    pub embedder: EmbedderSpec,
    /// SHA-256 of the alphabetical index file the snapshot was built from.
    pub source_digest: String,
    pub index: TermIndex,
}

impl IndexSnapshot {
    pub fn new(embedder: EmbedderSpec, source_digest: String, index: TermIndex) -> Self {
        Self {
            format: SNAPSHOT_FORMAT.into(),
            embedder,
            source_digest,
            index,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), SnapshotError> {
        Ok(write_json(path, self)?)
    }

    /// Loads a snapshot, checking the header before trusting the rest.
    pub fn load(path: &Path) -> Result<Self, SnapshotError> {
        #[derive(Deserialize)]
        struct Header {
            format: String,
        }
        let header: Header = read_json(path)?;
        if header.format != SNAPSHOT_FORMAT {
            return Err(SnapshotError::Format {
                path: path.display().to_string(),
                found: header.format,
            });
        }
        Ok(read_json(path)?)
    }

    pub fn check_embedder(&self, configured: &EmbedderSpec) -> Result<(), SnapshotError> {
        if &self.embedder != configured {
            return Err(SnapshotError::EmbedderMismatch {
                built: self.embedder.to_string(),
                configured: configured.to_string(),
            });
        }
        Ok(())
    }
}
