//! Model backends, prompt templates and output parsing.
//!
//! A [`Backend`] turns a rendered prompt into raw text. This crate ships the
//! two deterministic backends: [`ScriptedBackend`] replays a recorded answer
//! table and [`OracleBackend`] answers from gold labels. The HTTP backend
//! lives in the `clh` crate.

mod parse;
mod template;

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::code::CodeId;

pub use parse::{
    extract_ids, extract_strings, GenerationResult, IdConstraint, IdSelection, ParseError,
};
pub use template::{
    html_escape, Decoding, PromptTemplate, SlotValue, Slots, TemplateError, TemplateName,
    TemplateSet, DEFAULT_EVIDENCE, DEFAULT_NAVIGATOR, DEFAULT_RECONCILER, DEFAULT_VALIDATOR,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("backend request timed out")]
    Timeout,
    #[error("unparseable response: {0}")]
    UnparseableResponse(String),
    #[error("no scripted answer for template `{template}` with prompt hash {hash}")]
    ScriptMiss { template: String, hash: String },
    #[error("oracle has no gold labels for note `{0}`")]
    UnknownNote(String),
    #[error("empty prompt")]
    EmptyPrompt,
}

/// Everything a backend may look at for one call.
#[derive(Debug, Clone, Copy)]
pub struct GenerationRequest<'a> {
    pub template: TemplateName,
    pub prompt: &'a str,
    pub decoding: Decoding,
    /// Present for id-selecting prompts under constrained decoding.
    pub constraint: Option<&'a IdConstraint>,
    pub note_id: &'a str,
    /// The code behind each 1-based prompt id, for id-selecting prompts.
    pub candidates: &'a [CodeId],
}

pub trait Backend: Sync {
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<GenerationResult, BackendError>;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<GenerationResult, BackendError> {
        (**self).generate(request)
    }
}

/// Calls `backend` and enforces the request's constraint: under
/// constrained decoding the trimmed output must match it exactly.
pub fn generate_checked<B: Backend + ?Sized>(
    backend: &B,
    request: &GenerationRequest<'_>,
) -> Result<GenerationResult, BackendError> {
    if request.prompt.trim().is_empty() {
        return Err(BackendError::EmptyPrompt);
    }
    let result = backend.generate(request)?;
    if let Some(constraint) = request.constraint {
        if !constraint.matches(result.raw.trim()) {
            return Err(BackendError::UnparseableResponse(result.raw));
        }
    }
    Ok(result)
}

pub const SCRIPT_SCHEMA: &str = "clh.script/1";

/// One row of a scripted answer table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<String>,
    pub template: TemplateName,
    /// [`crate::content_hash`] of the rendered prompt.
    pub hash: String,
    pub answer: String,
}

/// Replays answers keyed by (template, prompt hash). A prompt missing from
/// the table is an error, so a table must cover every prompt of a run.
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    table: BTreeMap<(TemplateName, String), String>,
}

impl ScriptedBackend {
    pub fn new<I: IntoIterator<Item = ScriptRecord>>(records: I) -> Self {
        let table = records
            .into_iter()
            .map(|r| ((r.template, r.hash), r.answer))
            .collect();
        Self { table }
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn insert(&mut self, template: TemplateName, prompt: &str, answer: impl Into<String>) {
        self.table
            .insert((template, crate::content_hash(prompt)), answer.into());
    }

    pub fn records(&self) -> impl Iterator<Item = ScriptRecord> + '_ {
        self.table.iter().map(|((t, h), a)| ScriptRecord {
            schema: Some(SCRIPT_SCHEMA.into()),
            template: *t,
            hash: h.clone(),
            answer: a.clone(),
        })
    }
}

impl Backend for ScriptedBackend {
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<GenerationResult, BackendError> {
        let hash = crate::content_hash(request.prompt);
        match self.table.get(&(request.template, hash.clone())) {
            Some(answer) => Ok(GenerationResult::from_raw(answer.clone())),
            None => Err(BackendError::ScriptMiss {
                template: request.template.to_string(),
                hash,
            }),
        }
    }
}

/// Gold-label test double.
///
/// For id-selecting prompts it answers with exactly the ids whose candidate
/// codes are gold for the note (the first such id for the single-choice
/// validator, `0` when there is none). For the evidence prompt it answers
/// with the note's gold evidence texts. This gives an upper bound that
/// isolates retrieval losses from model errors.
#[derive(Debug, Clone, Default)]
pub struct OracleBackend {
    gold: BTreeMap<String, BTreeSet<CodeId>>,
    evidence: BTreeMap<String, Vec<String>>,
}

impl OracleBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_note(&mut self, note_id: &str, gold: BTreeSet<CodeId>, evidence: Vec<String>) {
        self.gold.insert(note_id.to_string(), gold);
        self.evidence.insert(note_id.to_string(), evidence);
    }

    fn wrap(decoding: Decoding, payload: &str) -> String {
        match decoding {
            Decoding::Thinking => {
                alloc::format!("Answering from gold labels.</think>\n<answer>{payload}</answer>")
            }
            Decoding::Constrained => alloc::format!("<answer>{payload}</answer>"),
        }
    }
}

impl Backend for OracleBackend {
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<GenerationResult, BackendError> {
        let gold = self
            .gold
            .get(request.note_id)
            .ok_or_else(|| BackendError::UnknownNote(request.note_id.to_string()))?;
        let payload = if request.template == TemplateName::Evidence {
            let spans = self
                .evidence
                .get(request.note_id)
                .map(Vec::as_slice)
                .unwrap_or_default();
            let quoted: Vec<String> = spans
                .iter()
                .map(|s| alloc::format!("\"{}\"", s.replace('"', "'")))
                .collect();
            quoted.join(", ")
        } else {
            let mut ids = request
                .candidates
                .iter()
                .enumerate()
                .filter(|(_, c)| gold.contains(*c))
                .map(|(i, _)| i + 1);
            let chosen: Vec<usize> = if request.template.single_choice() {
                ids.next().into_iter().collect()
            } else {
                ids.collect()
            };
            if chosen.is_empty() {
                "0".to_string()
            } else {
                chosen
                    .iter()
                    .map(|i| i.to_string())
                    .collect::<Vec<_>>()
                    .join(", ")
            }
        };
        Ok(GenerationResult::from_raw(Self::wrap(
            request.decoding,
            &payload,
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn code(s: &str) -> CodeId {
        CodeId::parse(s).unwrap()
    }

    fn request<'a>(
        template: TemplateName,
        prompt: &'a str,
        candidates: &'a [CodeId],
        constraint: Option<&'a IdConstraint>,
    ) -> GenerationRequest<'a> {
        GenerationRequest {
            template,
            prompt,
            decoding: if constraint.is_some() {
                Decoding::Constrained
            } else {
                Decoding::Thinking
            },
            constraint,
            note_id: "n1",
            candidates,
        }
    }

    #[test]
    fn scripted_replays_verbatim() {
        let mut b = ScriptedBackend::default();
        b.insert(TemplateName::Navigator, "prompt one", "<answer>2</answer>");
        let r = b
            .generate(&request(TemplateName::Navigator, "prompt one", &[], None))
            .unwrap();
        assert_eq!(r.raw, "<answer>2</answer>");
        let miss = b.generate(&request(TemplateName::Validator, "prompt one", &[], None));
        assert!(matches!(miss, Err(BackendError::ScriptMiss { .. })));
    }

    #[test]
    fn oracle_selects_gold_ids() {
        let mut o = OracleBackend::new();
        o.add_note(
            "n1",
            BTreeSet::from([code("T81.44"), code("J18.9")]),
            vec!["sepsis \"after\" surgery".into()],
        );
        let cands = [code("A22.7"), code("T81.44"), code("J18.9")];
        let nav = o
            .generate(&request(TemplateName::Navigator, "p", &cands, None))
            .unwrap();
        assert_eq!(extract_ids(&nav, 3).unwrap().ids, vec![2, 3]);
        let val = o
            .generate(&request(TemplateName::Validator, "p", &cands, None))
            .unwrap();
        assert_eq!(extract_ids(&val, 3).unwrap().ids, vec![2]);
        let none = o
            .generate(&request(TemplateName::Reconciler, "p", &cands[..1], None))
            .unwrap();
        assert!(extract_ids(&none, 1).unwrap().none_selected);
        let ev = o
            .generate(&request(TemplateName::Evidence, "p", &[], None))
            .unwrap();
        assert_eq!(
            extract_strings(&ev).unwrap(),
            vec!["sepsis 'after' surgery"]
        );
    }

    #[test]
    fn constrained_output_is_checked() {
        let mut o = OracleBackend::new();
        o.add_note("n1", BTreeSet::from([code("A22.7")]), vec![]);
        let cands = [code("A22.7"), code("T81.44")];
        let c = IdConstraint::new(2, false);
        let ok =
            generate_checked(&o, &request(TemplateName::Validator, "p", &cands, Some(&c))).unwrap();
        assert_eq!(ok.raw, "<answer>1</answer>");

        let mut s = ScriptedBackend::default();
        s.insert(TemplateName::Validator, "p", "I think 1");
        let err = generate_checked(&s, &request(TemplateName::Validator, "p", &cands, Some(&c)));
        assert!(matches!(err, Err(BackendError::UnparseableResponse(_))));
        assert_eq!(
            generate_checked(&s, &request(TemplateName::Validator, " ", &cands, None)),
            Err(BackendError::EmptyPrompt)
        );
    }

    #[test]
    fn oracle_unknown_note() {
        let o = OracleBackend::new();
        assert_eq!(
            o.generate(&request(TemplateName::Navigator, "p", &[], None)),
            Err(BackendError::UnknownNote("n1".into()))
        );
    }
}
