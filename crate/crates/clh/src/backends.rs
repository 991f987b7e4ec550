//! Backend plumbing: answer-table recording and loading, prompt template
//! files, and construction of the configured backend.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use clh_core::backend::{
    Backend, BackendError, GenerationRequest, GenerationResult, OracleBackend, PromptTemplate,
    ScriptRecord, ScriptedBackend, TemplateName, TemplateSet, SCRIPT_SCHEMA,
};
use clh_core::pipeline::ClinicalNote;
use clh_core::{content_hash, retrieval::Embedder, retrieval::HashEmbedder};

use crate::config::{BackendKind, BackendSettings, EmbedderKind, EmbedderSettings, Env};
use crate::http::{HttpBackend, HttpEmbedder, HttpSettings};
use crate::io::{read_jsonl, write_jsonl, IoError};

/// Passes calls through and keeps every successful answer, keyed like a
/// [`ScriptedBackend`] table.
pub struct RecordingBackend<B> {
    inner: B,
    table: Mutex<BTreeMap<(TemplateName, String), String>>,
}

impl<B: Backend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            table: Mutex::new(BTreeMap::new()),
        }
    }

    /// Recorded rows sorted by (template, hash).
    pub fn records(&self) -> Vec<ScriptRecord> {
        let table = self.table.lock().unwrap_or_else(|e| e.into_inner());
        table
            .iter()
            .map(|((template, hash), answer)| ScriptRecord {
                schema: Some(SCRIPT_SCHEMA.into()),
                template: *template,
                hash: hash.clone(),
                answer: answer.clone(),
            })
            .collect()
    }
}

impl<B: Backend> Backend for RecordingBackend<B> {
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<GenerationResult, BackendError> {
        let result = self.inner.generate(request)?;
        let key = (request.template, content_hash(request.prompt));
        let mut table = self.table.lock().unwrap_or_else(|e| e.into_inner());
        match table.get_mut(&key) {
            None => {
                table.insert(key, result.raw.clone());
            }
            Some(kept) if *kept != result.raw => {
                // Oracle answers depend on the note, not only the prompt text.
                // Keep the smaller answer so the table is independent of call order.
                log::warn!(
                    "note {}: {} prompt already recorded with a different answer",
                    request.note_id,
                    request.template
                );
                if result.raw < *kept {
                    *kept = result.raw.clone();
                }
            }
            Some(_) => {}
        }
        drop(table);
        Ok(result)
    }
}

pub fn load_script(path: &Path) -> Result<ScriptedBackend, IoError> {
    Ok(ScriptedBackend::new(read_jsonl::<ScriptRecord>(path)?))
}

/// Writes an answer table, merging with rows already in `path` when it
/// exists. Rows are sorted, so the file is stable across runs.
pub fn save_script(path: &Path, records: Vec<ScriptRecord>) -> Result<(), IoError> {
    let mut merged: BTreeMap<(TemplateName, String), ScriptRecord> = BTreeMap::new();
    let existing = if path.exists() {
        read_jsonl::<ScriptRecord>(path)?
    } else {
        Vec::new()
    };
    for r in existing.into_iter().chain(records) {
        merged.insert(
            (r.template, r.hash.clone()),
            ScriptRecord {
                schema: Some(SCRIPT_SCHEMA.into()),
                ..r
            },
        );
    }
    write_jsonl(path, &merged.into_values().collect::<Vec<_>>())
}

/// Built-in prompts, with any of `evidence.txt`, `navigator.txt`,
/// `validator.txt` and `reconciler.txt` found in `dir` taking their place.
pub fn load_templates(dir: Option<&Path>) -> anyhow::Result<TemplateSet> {
    let mut set = TemplateSet::default();
    let Some(dir) = dir else {
        return Ok(set);
    };
    for name in [
        TemplateName::Evidence,
        TemplateName::Navigator,
        TemplateName::Validator,
        TemplateName::Reconciler,
    ] {
        let path = dir.join(format!("{name}.txt"));
        if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(|e| IoError::io(&path, e))?;
            set.set(
                PromptTemplate::new(name, &text)
                    .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?,
            );
        }
    }
    Ok(set)
}

pub fn oracle_for(notes: &[ClinicalNote]) -> OracleBackend {
    let mut o = OracleBackend::new();
    for n in notes {
        o.add_note(&n.id, n.gold_codes(), n.evidence_texts());
    }
    o
}

/// The configured backend, boxed.
pub fn build_backend(
    settings: &BackendSettings,
    notes: &[ClinicalNote],
    env: &dyn Env,
) -> anyhow::Result<Box<dyn Backend>> {
    Ok(match settings.kind {
        BackendKind::Oracle => Box::new(oracle_for(notes)),
        BackendKind::Scripted => {
            let path = settings
                .script
                .as_deref()
                .ok_or_else(|| anyhow::anyhow!("scripted backend needs a script file"))?;
            Box::new(load_script(path)?)
        }
        BackendKind::Http => Box::new(HttpBackend::new(HttpSettings {
            base_url: settings.base_url.clone(),
            model: settings.model.clone(),
            timeout: Duration::from_secs(settings.timeout_secs),
            max_retries: settings.max_retries,
            backoff: Duration::from_millis(settings.backoff_ms),
            max_in_flight: settings.max_in_flight,
            api_key: env.var(&settings.api_key_env),
        })),
    })
}

pub fn build_embedder(settings: &EmbedderSettings, env: &dyn Env) -> Box<dyn Embedder> {
    match settings.kind {
        EmbedderKind::Hash => Box::new(HashEmbedder::new(settings.dim, settings.seed)),
        EmbedderKind::Http => Box::new(HttpEmbedder::new(
            HttpSettings {
                base_url: settings.base_url.clone(),
                model: settings.model.clone(),
                timeout: Duration::from_secs(settings.timeout_secs),
                max_retries: 3,
                backoff: Duration::from_millis(500),
                max_in_flight: 8,
                api_key: env.var(&settings.api_key_env),
            },
            settings.dim,
        )),
    }
}
