//! Engine configuration: TOML file, environment and command-line flags, in
//! increasing order of precedence.
//!
//! Every field has a default, so an empty file (or no file) is valid.
//! Unknown keys are rejected. Relative paths in a file are resolved against
//! the file's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clh_core::backend::Decoding;
use clh_core::pipeline::{ContextLevel, EvidenceSource, PipelineConfig};
use clh_core::retrieval::{Bm25Params, HnswParams, RetrievalConfig, SearchMode};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error("invalid value for environment variable {name}: {message}")]
    Env { name: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding tabular.jsonl, alpha_index.jsonl and guidelines.jsonl.
    pub taxonomy_dir: Option<PathBuf>,
    pub tabular: Option<PathBuf>,
    pub alpha_index: Option<PathBuf>,
    pub guidelines: Option<PathBuf>,
    pub notes: Option<PathBuf>,
    /// Prebuilt index snapshot; built from the alphabetical index when absent.
    pub index_snapshot: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSettings {
    pub k: usize,
    pub mode: SearchMode,
    pub k_rrf: f64,
    pub fusion_depth: usize,
    pub bm25_k1: f64,
    pub bm25_b: f64,
    pub hnsw_m: usize,
    pub ef_construct: usize,
    pub ef_search: usize,
    pub hnsw_seed: u64,
}

impl Default for RetrievalSettings {
    fn default() -> Self {
        let r = RetrievalConfig::default();
        Self {
            k: r.k,
            mode: r.mode,
            k_rrf: r.k_rrf,
            fusion_depth: r.fusion_depth,
            bm25_k1: r.bm25.k1,
            bm25_b: r.bm25.b,
            hnsw_m: r.hnsw.m,
            ef_construct: r.hnsw.ef_construct,
            ef_search: r.hnsw.ef_search,
            hnsw_seed: r.hnsw.seed,
        }
    }
}

impl RetrievalSettings {
    pub fn to_core(&self) -> RetrievalConfig {
        RetrievalConfig {
            k: self.k,
            mode: self.mode,
            k_rrf: self.k_rrf,
            fusion_depth: self.fusion_depth,
            bm25: Bm25Params {
                k1: self.bm25_k1,
                b: self.bm25_b,
            },
            hnsw: HnswParams {
                m: self.hnsw_m,
                ef_construct: self.ef_construct,
                ef_search: self.ef_search,
                seed: self.hnsw_seed,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    /// Offline feature-hashing embedder.
    #[default]
    Hash,
    /// OpenAI-compatible embeddings endpoint.
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderSettings {
    pub kind: EmbedderKind,
    pub dim: usize,
    pub seed: u64,
    pub base_url: String,
    pub model: String,
    pub timeout_secs: u64,
    pub api_key_env: String,
}

impl Default for EmbedderSettings {
    fn default() -> Self {
        Self {
            kind: EmbedderKind::Hash,
            dim: 64,
            seed: 0x5eed,
            base_url: "http://localhost:8001/v1".into(),
            model: String::new(),
            timeout_secs: 30,
            api_key_env: "CLH_EMBED_API_KEY".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Oracle,
    Scripted,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSettings {
    pub kind: BackendKind,
    pub decoding: Decoding,
    /// Answer table for the scripted backend.
    pub script: Option<PathBuf>,
    /// Directory with evidence.txt, navigator.txt, validator.txt and
    /// reconciler.txt overriding the built-in prompts.
    pub templates_dir: Option<PathBuf>,
    pub base_url: String,
    pub model: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub max_in_flight: usize,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
}

impl Default for BackendSettings {
    fn default() -> Self {
        Self {
            kind: BackendKind::Oracle,
            decoding: Decoding::Thinking,
            script: None,
            templates_dir: None,
            base_url: "http://localhost:8000/v1".into(),
            model: String::new(),
            timeout_secs: 300,
            max_retries: 3,
            backoff_ms: 500,
            max_in_flight: 8,
            api_key_env: "CLH_API_KEY".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSettings {
    pub passes: u32,
    pub evidence_source: EvidenceSource,
    pub stage_budget_ms: Option<u64>,
    pub parse_retries: u32,
    pub context: ContextLevel,
    /// Worker threads for per-note and per-item fan-out.
    pub workers: usize,
    /// Record stage timings. Off by default so traces are reproducible.
    pub timings: bool,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            passes: p.passes,
            evidence_source: p.evidence_source,
            stage_budget_ms: p.stage_budget_ms,
            parse_retries: p.parse_retries,
            context: p.context,
            workers: 4,
            timings: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSettings {
    pub k_values: Vec<usize>,
    pub context_levels: Vec<ContextLevel>,
    /// Arm for candidate-scaling runs.
    pub context: ContextLevel,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        Self {
            k_values: vec![0, 1, 3, 5, 10],
            context_levels: ContextLevel::ALL.to_vec(),
            context: ContextLevel::Guidelines,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub data: DataConfig,
    pub retrieval: RetrievalSettings,
    pub embedder: EmbedderSettings,
    pub backend: BackendSettings,
    pub pipeline: PipelineSettings,
    pub experiment: ExperimentSettings,
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

/// Source of environment values; a map in tests, the process env otherwise.
pub trait Env {
    fn var(&self, name: &str) -> Option<String>;
}

pub struct ProcessEnv;

impl Env for ProcessEnv {
    fn var(&self, name: &str) -> Option<String> {
        std::env::var(name).ok().filter(|v| !v.is_empty())
    }
}

impl Env for BTreeMap<String, String> {
    fn var(&self, name: &str) -> Option<String> {
        self.get(name).cloned()
    }
}

pub const ENV_EMBED_BASE_URL: &str = "CLH_EMBED_BASE_URL";
pub const ENV_EMBED_MODEL: &str = "CLH_EMBED_MODEL";
pub const ENV_EMBED_TIMEOUT: &str = "CLH_EMBED_TIMEOUT_SECS";

impl EngineConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let mut config: EngineConfig =
            toml::from_str(text).map_err(|source| ConfigError::Parse {
                path: path.to_path_buf(),
                source,
            })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let d = &mut config.data;
        for p in [
            &mut d.taxonomy_dir,
            &mut d.tabular,
            &mut d.alpha_index,
            &mut d.guidelines,
            &mut d.notes,
            &mut d.index_snapshot,
        ] {
            resolve(base, p);
        }
        resolve(base, &mut config.backend.script);
        resolve(base, &mut config.backend.templates_dir);
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, path)
    }

    /// Applies the embedder endpoint variables. Credentials are read at
    /// backend construction, never stored in the config.
    pub fn apply_env(&mut self, env: &dyn Env) -> Result<(), ConfigError> {
        if let Some(url) = env.var(ENV_EMBED_BASE_URL) {
            self.embedder.base_url = url;
        }
        if let Some(model) = env.var(ENV_EMBED_MODEL) {
            self.embedder.model = model;
        }
        if let Some(t) = env.var(ENV_EMBED_TIMEOUT) {
            self.embedder.timeout_secs = t.parse().map_err(|e| ConfigError::Env {
                name: ENV_EMBED_TIMEOUT.into(),
                message: format!("{e}"),
            })?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: &str| Err(ConfigError::Invalid(m.into()));
        let r = &self.retrieval;
        if r.k == 0 {
            return fail("retrieval.k must be at least 1");
        }
        if r.k_rrf <= 0.0 || !r.k_rrf.is_finite() {
            return fail("retrieval.k_rrf must be positive");
        }
        if r.bm25_k1 < 0.0 || !(0.0..=1.0).contains(&r.bm25_b) {
            return fail("retrieval.bm25_k1 must be >= 0 and bm25_b in [0, 1]");
        }
        if r.hnsw_m < 2 || r.ef_construct == 0 || r.ef_search == 0 {
            return fail("retrieval.hnsw_m must be >= 2 and ef_construct, ef_search >= 1");
        }
        if self.embedder.dim == 0 {
            return fail("embedder.dim must be at least 1");
        }
        if self.pipeline.passes == 0 {
            return fail("pipeline.passes must be at least 1");
        }
        if self.pipeline.workers == 0 {
            return fail("pipeline.workers must be at least 1");
        }
        if self.backend.max_in_flight == 0 {
            return fail("backend.max_in_flight must be at least 1");
        }
        if self.backend.kind == BackendKind::Scripted && self.backend.script.is_none() {
            return fail("backend.kind = \"scripted\" needs backend.script");
        }
        if self.backend.kind == BackendKind::Http && self.backend.model.is_empty() {
            return fail("backend.kind = \"http\" needs backend.model");
        }
        if self.embedder.kind == EmbedderKind::Http && self.embedder.model.is_empty() {
            return fail("embedder.kind = \"http\" needs embedder.model");
        }
        Ok(())
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            k: self.retrieval.k,
            mode: self.retrieval.mode,
            decoding: self.backend.decoding,
            passes: self.pipeline.passes,
            evidence_source: self.pipeline.evidence_source,
            stage_budget_ms: self.pipeline.stage_budget_ms,
            parse_retries: self.pipeline.parse_retries,
            context: self.pipeline.context,
        }
    }

    /// Canonical JSON of the whole configuration, the input to the manifest's
    /// config hash.
    pub fn snapshot(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}
