//! The four coding stages run per note: Analyze (evidence extraction),
//! Locate (index navigation), Assign (tabular validation per chapter group)
//! and Verify (reconciliation).
//!
//! Each stage narrows the previous one's output, so a [`CodingRun`] always
//! satisfies `final ⊆ tentative ⊆ navigator codes ⊆ retrieved codes`.
//! Fan-out within a stage goes through an [`Executor`]; results are merged
//! in input order, so the executor never changes the outcome.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    extract_ids, extract_strings, generate_checked, Backend, BackendError, Decoding,
    GenerationRequest, GenerationResult, IdConstraint, IdSelection, ParseError, Slots,
    TemplateName, TemplateSet,
};
use crate::code::{Chapter, CodeId};
use crate::retrieval::{Embedder, SearchMode, TermIndex};
use crate::taxonomy::Taxonomy;

pub const RUN_SCHEMA: &str = "clh.run/1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NoteError {
    #[error("note has an empty id")]
    EmptyId,
    #[error("note `{0}` has empty text")]
    EmptyText(String),
    #[error("note `{note}`: evidence span {start}..{end} lies outside the text ({len} chars)")]
    SpanOutOfBounds {
        note: String,
        start: usize,
        end: usize,
        len: usize,
    },
}

/// A gold evidence span in character offsets (end exclusive).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvidenceSpan {
    pub code: CodeId,
    pub start: usize,
    pub end: usize,
}

/// One line of `notes.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClinicalNote {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<String>,
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub doc_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<BTreeSet<CodeId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_evidence: Option<Vec<EvidenceSpan>>,
}

impl ClinicalNote {
    pub fn new(id: &str, text: &str) -> Self {
        Self {
            schema: None,
            id: id.into(),
            text: text.into(),
            doc_type: String::new(),
            gold: None,
            gold_evidence: None,
        }
    }

    pub fn validate(&self) -> Result<(), NoteError> {
        if self.id.is_empty() {
            return Err(NoteError::EmptyId);
        }
        let len = self.text.chars().count();
        for span in self.gold_evidence.iter().flatten() {
            if span.start >= span.end || span.end > len {
                return Err(NoteError::SpanOutOfBounds {
                    note: self.id.clone(),
                    start: span.start,
                    end: span.end,
                    len,
                });
            }
        }
        Ok(())
    }

    pub fn gold_codes(&self) -> BTreeSet<CodeId> {
        self.gold.clone().unwrap_or_default()
    }

    pub fn span_text(&self, span: &EvidenceSpan) -> String {
        self.text
            .chars()
            .skip(span.start)
            .take(span.end - span.start)
            .collect()
    }

    /// Text of every gold evidence span, in order.
    pub fn evidence_texts(&self) -> Vec<String> {
        self.gold_evidence
            .iter()
            .flatten()
            .map(|s| self.span_text(s))
            .collect()
    }
}

/// Runs per-item work for a stage. Implementations may run items
/// concurrently but must return results in item order.
pub trait Executor: Sync {
    fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        items.iter().map(f).collect()
    }
}

/// Millisecond clock for stage timings and budgets.
pub trait Clock: Sync {
    /// `None` disables timing.
    fn now_ms(&self) -> Option<u64>;
}

/// No timings, no budgets; keeps traces byte-reproducible.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoClock;

impl Clock for NoClock {
    fn now_ms(&self) -> Option<u64> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Analyze,
    Locate,
    Assign,
    Verify,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Analyze, Stage::Locate, Stage::Assign, Stage::Verify];

    pub fn number(self) -> usize {
        self as usize + 1
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Analyze => "analyze",
            Stage::Locate => "locate",
            Stage::Assign => "assign",
            Stage::Verify => "verify",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceSource {
    /// Stage 1 asks the model for snippets.
    #[default]
    Model,
    /// Stage 1 uses the note's gold evidence spans verbatim.
    GoldSpans,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Index terms retrieved per snippet.
    pub k: usize,
    pub mode: SearchMode,
    pub decoding: Decoding,
    /// Full passes per note; later passes see earlier final codes appended
    /// to the note.
    pub passes: u32,
    pub evidence_source: EvidenceSource,
    /// Wall-clock budget per stage; needs a real [`Clock`].
    pub stage_budget_ms: Option<u64>,
    /// Extra attempts when a response cannot be parsed.
    pub parse_retries: u32,
    /// What the validator and reconciler see besides the codes.
    pub context: ContextLevel,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k: 10,
            mode: SearchMode::Hybrid,
            decoding: Decoding::Thinking,
            passes: 1,
            evidence_source: EvidenceSource::Model,
            stage_budget_ms: None,
            parse_retries: 1,
            context: ContextLevel::Guidelines,
        }
    }
}

/// Context given to the code-choosing stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextLevel {
    /// Bare code identifiers.
    IdsOnly,
    /// Codes with their short descriptions.
    Descriptions,
    /// Descriptions plus chapter guidelines and instructional notes.
    #[default]
    Guidelines,
}

impl ContextLevel {
    pub const ALL: [ContextLevel; 3] = [
        ContextLevel::IdsOnly,
        ContextLevel::Descriptions,
        ContextLevel::Guidelines,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ContextLevel::IdsOnly => "ids_only",
            ContextLevel::Descriptions => "ids+descriptions",
            ContextLevel::Guidelines => "ids+descriptions+guidelines",
        }
    }
}

impl core::str::FromStr for ContextLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ids_only" => Ok(ContextLevel::IdsOnly),
            "descriptions" | "ids+descriptions" => Ok(ContextLevel::Descriptions),
            "guidelines" | "ids+descriptions+guidelines" => Ok(ContextLevel::Guidelines),
            _ => Err(alloc::format!("unknown context level `{s}`")),
        }
    }
}

/// A retrieved or selected index entry as recorded in the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredEntry {
    pub entry_id: u32,
    pub display: String,
    pub code: CodeId,
    pub score: f64,
}

/// One prompt/response pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    pub template: TemplateName,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTrace {
    pub stage: Stage,
    pub exchanges: Vec<Exchange>,
    pub errors: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elapsed_ms: Option<u64>,
}

impl StageTrace {
    fn new(stage: Stage) -> Self {
        Self {
            stage,
            exchanges: Vec::new(),
            errors: Vec::new(),
            elapsed_ms: None,
        }
    }
}

/// Full per-note trace of one pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodingRun {
    pub schema: String,
    pub note_id: String,
    /// Hash of the run manifest, filled in by the writer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<String>,
    pub passes: u32,
    /// Final codes of earlier passes, oldest first.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scratchpad: Vec<Vec<CodeId>>,
    pub snippets: Vec<String>,
    /// Retrieved terms per snippet, aligned with `snippets`.
    pub retrieved: Vec<Vec<ScoredEntry>>,
    /// Navigator selections per snippet, aligned with `snippets`.
    pub navigator_selected: Vec<Vec<ScoredEntry>>,
    pub chapter_groups: BTreeMap<Chapter, Vec<CodeId>>,
    pub tentative: Vec<CodeId>,
    #[serde(rename = "final")]
    pub final_codes: Vec<CodeId>,
    pub warnings: Vec<String>,
    pub stages: Vec<StageTrace>,
    pub backend_calls: u32,
}

impl CodingRun {
    fn empty(note_id: &str) -> Self {
        Self {
            schema: RUN_SCHEMA.into(),
            note_id: note_id.into(),
            manifest: None,
            passes: 1,
            scratchpad: Vec::new(),
            snippets: Vec::new(),
            retrieved: Vec::new(),
            navigator_selected: Vec::new(),
            chapter_groups: BTreeMap::new(),
            tentative: Vec::new(),
            final_codes: Vec::new(),
            warnings: Vec::new(),
            stages: Vec::new(),
            backend_calls: 0,
        }
    }

    pub fn stage(&self, stage: Stage) -> Option<&StageTrace> {
        self.stages.iter().find(|s| s.stage == stage)
    }

    /// The code set implied by a stage's output.
    pub fn stage_codes(&self, stage: Stage) -> BTreeSet<CodeId> {
        let codes = |lists: &Vec<Vec<ScoredEntry>>| {
            lists.iter().flatten().map(|e| e.code.clone()).collect()
        };
        match stage {
            Stage::Analyze => codes(&self.retrieved),
            Stage::Locate => codes(&self.navigator_selected),
            Stage::Assign => self.tentative.iter().cloned().collect(),
            Stage::Verify => self.final_codes.iter().cloned().collect(),
        }
    }

    /// Checks `final ⊆ tentative ⊆ group candidates ⊆ navigator codes ⊆
    /// retrieved codes`, naming the first violated link.
    pub fn check_containment(&self) -> Result<(), String> {
        let grouped: BTreeSet<CodeId> = self.chapter_groups.values().flatten().cloned().collect();
        let chain = [
            (
                "final",
                self.stage_codes(Stage::Verify),
                "tentative",
                self.stage_codes(Stage::Assign),
            ),
            (
                "tentative",
                self.stage_codes(Stage::Assign),
                "chapter groups",
                grouped.clone(),
            ),
            (
                "chapter groups",
                grouped,
                "navigator",
                self.stage_codes(Stage::Locate),
            ),
            (
                "navigator",
                self.stage_codes(Stage::Locate),
                "retrieved",
                self.stage_codes(Stage::Analyze),
            ),
        ];
        for (inner_name, inner, outer_name, outer) in chain {
            if !inner.is_subset(&outer) {
                return Err(alloc::format!(
                    "{inner_name} codes are not a subset of {outer_name} codes"
                ));
            }
        }
        Ok(())
    }
}

/// Partitions codes by chapter; groups come in chapter order and hold
/// ascending, distinct codes.
pub fn group_by_chapter<'a, I>(codes: I) -> BTreeMap<Chapter, Vec<CodeId>>
where
    I: IntoIterator<Item = &'a CodeId>,
{
    let mut groups: BTreeMap<Chapter, BTreeSet<CodeId>> = BTreeMap::new();
    for code in codes {
        groups
            .entry(*code.chapter())
            .or_default()
            .insert(code.clone());
    }
    groups
        .into_iter()
        .map(|(ch, set)| (ch, set.into_iter().collect()))
        .collect()
}

/// Output of one id-selecting call.
struct Selection {
    ids: Vec<usize>,
    exchanges: Vec<Exchange>,
    warnings: Vec<String>,
    error: Option<String>,
    calls: u32,
}

/// Outcome of locating one snippet.
#[derive(Debug, Clone, PartialEq)]
pub struct LocateOutcome {
    pub retrieved: Vec<ScoredEntry>,
    pub selected: Vec<ScoredEntry>,
    pub exchanges: Vec<Exchange>,
    pub errors: Vec<String>,
    pub warnings: Vec<String>,
    pub calls: u32,
}

/// Outcome of validating one chapter group.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignOutcome {
    pub code: Option<CodeId>,
    pub exchanges: Vec<Exchange>,
    pub errors: Vec<String>,
    pub warnings: Vec<String>,
    pub calls: u32,
}

/// Outcome of stage 1 or stage 4.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome<T> {
    pub value: T,
    pub exchanges: Vec<Exchange>,
    pub errors: Vec<String>,
    pub warnings: Vec<String>,
    pub calls: u32,
}

/// Everything a pipeline run reads. Cheap to copy; holds references only.
pub struct Pipeline<'a, B: Backend, E: Executor> {
    pub taxonomy: &'a Taxonomy,
    pub index: &'a TermIndex,
    pub embedder: &'a dyn Embedder,
    pub templates: &'a TemplateSet,
    pub backend: &'a B,
    pub executor: &'a E,
    pub clock: &'a dyn Clock,
    pub config: PipelineConfig,
}

impl<'a, B: Backend, E: Executor> Pipeline<'a, B, E> {
    /// The same inputs under another configuration.
    pub fn with_config(&self, config: PipelineConfig) -> Self {
        Self {
            taxonomy: self.taxonomy,
            index: self.index,
            embedder: self.embedder,
            templates: self.templates,
            backend: self.backend,
            executor: self.executor,
            clock: self.clock,
            config,
        }
    }

    fn call(
        &self,
        template: TemplateName,
        prompt: String,
        note_id: &str,
        candidates: &[CodeId],
    ) -> (Result<GenerationResult, BackendError>, Exchange) {
        let constraint = IdConstraint::new(candidates.len(), !template.single_choice());
        let constrained =
            self.config.decoding == Decoding::Constrained && template != TemplateName::Evidence;
        let request = GenerationRequest {
            template,
            prompt: &prompt,
            decoding: self.config.decoding,
            constraint: constrained.then_some(&constraint),
            note_id,
            candidates,
        };
        let result = generate_checked(self.backend, &request);
        let exchange = Exchange {
            template,
            prompt: prompt.clone(),
            response: match &result {
                Ok(r) => Some(r.raw.clone()),
                Err(BackendError::UnparseableResponse(raw)) => Some(raw.clone()),
                Err(_) => None,
            },
            error: result.as_ref().err().map(|e| e.to_string()),
        };
        (result, exchange)
    }

    /// Calls an id-selecting template, retrying unparseable answers.
    fn select_ids(
        &self,
        template: TemplateName,
        prompt: String,
        note_id: &str,
        candidates: &[CodeId],
    ) -> Selection {
        let mut sel = Selection {
            ids: Vec::new(),
            exchanges: Vec::new(),
            warnings: Vec::new(),
            error: None,
            calls: 0,
        };
        for _ in 0..=self.config.parse_retries {
            let (result, exchange) = self.call(template, prompt.clone(), note_id, candidates);
            sel.exchanges.push(exchange);
            sel.calls += 1;
            let parsed: Result<IdSelection, String> = match result {
                Ok(r) => extract_ids(&r, candidates.len()).map_err(|e| e.to_string()),
                Err(e @ BackendError::UnparseableResponse(_)) => Err(e.to_string()),
                Err(e) => {
                    sel.error = Some(alloc::format!("{template}: {e}"));
                    return sel;
                }
            };
            match parsed {
                Ok(ids) => {
                    for d in ids.dropped {
                        sel.warnings.push(alloc::format!(
                            "{template}: dropped out-of-range id {d} (max {})",
                            candidates.len()
                        ));
                    }
                    sel.ids = ids.ids;
                    sel.error = None;
                    return sel;
                }
                Err(e) => sel.error = Some(alloc::format!("{template}: {e}")),
            }
        }
        sel
    }

    /// Chapter guidelines for `codes`, empty below [`ContextLevel::Guidelines`].
    fn guideline_text(&self, codes: &[CodeId], warnings: &mut Vec<String>) -> String {
        if self.config.context < ContextLevel::Guidelines {
            return String::new();
        }
        let lookup = self.taxonomy.guidelines_for(codes);
        for ch in &lookup.missing {
            warnings.push(alloc::format!("no guideline for chapter {ch}"));
        }
        lookup.text()
    }

    fn code_line(&self, code: &CodeId) -> String {
        match self.taxonomy.description(code) {
            Some(desc) if self.config.context >= ContextLevel::Descriptions => {
                alloc::format!("{code} {desc}")
            }
            _ => code.to_string(),
        }
    }

    /// Stage 1: snippets of codeable evidence in `text`.
    pub fn analyze(&self, note: &ClinicalNote, text: &str) -> StageOutcome<Vec<String>> {
        let mut out = StageOutcome {
            value: Vec::new(),
            exchanges: Vec::new(),
            errors: Vec::new(),
            warnings: Vec::new(),
            calls: 0,
        };
        if self.config.evidence_source == EvidenceSource::GoldSpans {
            out.value = note.evidence_texts();
            return out;
        }
        if text.trim().is_empty() {
            out.errors
                .push(NoteError::EmptyText(note.id.clone()).to_string());
            return out;
        }
        let prompt = match self
            .templates
            .evidence
            .render(&Slots::new().text("note", text), self.config.decoding)
        {
            Ok(p) => p,
            Err(e) => {
                out.errors.push(e.to_string());
                return out;
            }
        };
        for _ in 0..=self.config.parse_retries {
            let (result, exchange) =
                self.call(TemplateName::Evidence, prompt.clone(), &note.id, &[]);
            out.exchanges.push(exchange);
            out.calls += 1;
            match result
                .map_err(|e| e.to_string())
                .and_then(|r| extract_strings(&r).map_err(|e: ParseError| e.to_string()))
            {
                Ok(snippets) => {
                    out.value = snippets;
                    out.errors.clear();
                    return out;
                }
                Err(e) => {
                    out.errors.clear();
                    out.errors.push(alloc::format!("evidence: {e}"));
                }
            }
        }
        out
    }

    /// Stage 2 for one snippet: retrieve the top-k index terms and let the
    /// navigator pick among them.
    pub fn locate(&self, note_id: &str, snippet: &str) -> LocateOutcome {
        let mut out = LocateOutcome {
            retrieved: Vec::new(),
            selected: Vec::new(),
            exchanges: Vec::new(),
            errors: Vec::new(),
            warnings: Vec::new(),
            calls: 0,
        };
        let hits =
            match self
                .index
                .retrieve_terms(self.embedder, snippet, self.config.k, self.config.mode)
            {
                Ok(h) => h,
                Err(e) => {
                    out.errors.push(alloc::format!("retrieval: {e}"));
                    return out;
                }
            };
        out.retrieved = hits
            .iter()
            .map(|h| ScoredEntry {
                entry_id: h.entry.id,
                display: h.entry.display.clone(),
                code: h.entry.code.clone(),
                score: h.score,
            })
            .collect();
        if out.retrieved.is_empty() {
            return out;
        }
        let slots = Slots::new()
            .list("term", out.retrieved.iter().map(|e| e.display.clone()))
            .text("query", snippet);
        let prompt = match self
            .templates
            .navigator
            .render(&slots, self.config.decoding)
        {
            Ok(p) => p,
            Err(e) => {
                out.errors.push(e.to_string());
                return out;
            }
        };
        let candidates: Vec<CodeId> = out.retrieved.iter().map(|e| e.code.clone()).collect();
        let sel = self.select_ids(TemplateName::Navigator, prompt, note_id, &candidates);
        out.selected = sel
            .ids
            .iter()
            .map(|&i| out.retrieved[i - 1].clone())
            .collect();
        out.exchanges = sel.exchanges;
        out.warnings = sel.warnings;
        out.errors.extend(sel.error);
        out.calls = sel.calls;
        out
    }

    /// Stage 3 for one chapter group: at most one code, always a member of
    /// `group`.
    pub fn assign(&self, note_id: &str, text: &str, group: &[CodeId]) -> AssignOutcome {
        let mut out = AssignOutcome {
            code: None,
            exchanges: Vec::new(),
            errors: Vec::new(),
            warnings: Vec::new(),
            calls: 0,
        };
        if group.is_empty() {
            return out;
        }
        let slots = Slots::new()
            .text("note", text)
            .text("guidelines", self.guideline_text(group, &mut out.warnings))
            .list("code", group.iter().map(|c| self.code_line(c)));
        let prompt = match self
            .templates
            .validator
            .render(&slots, self.config.decoding)
        {
            Ok(p) => p,
            Err(e) => {
                out.errors.push(e.to_string());
                return out;
            }
        };
        let sel = self.select_ids(TemplateName::Validator, prompt, note_id, group);
        if sel.ids.len() > 1 {
            out.warnings.push(alloc::format!(
                "validator returned {} ids; kept the first",
                sel.ids.len()
            ));
        }
        out.code = sel.ids.first().map(|&i| group[i - 1].clone());
        out.exchanges = sel.exchanges;
        out.warnings.extend(sel.warnings);
        out.errors.extend(sel.error);
        out.calls = sel.calls;
        out
    }

    /// Stage 4: the final ordered code list, a subset of `tentative` in the
    /// model's order.
    pub fn reconcile(
        &self,
        note_id: &str,
        text: &str,
        tentative: &[CodeId],
    ) -> StageOutcome<Vec<CodeId>> {
        let mut out = StageOutcome {
            value: Vec::new(),
            exchanges: Vec::new(),
            errors: Vec::new(),
            warnings: Vec::new(),
            calls: 0,
        };
        if tentative.is_empty() {
            return out;
        }
        let mut notes_block = String::new();
        let codes_with_notes = if self.config.context == ContextLevel::Guidelines {
            tentative
        } else {
            &[]
        };
        for code in codes_with_notes {
            let notes = match self.taxonomy.instructional_notes_for(code) {
                Ok(n) => n,
                Err(e) => {
                    out.warnings
                        .push(alloc::format!("instructional notes: {e}"));
                    Default::default()
                }
            };
            if notes.is_empty() {
                continue;
            }
            if !notes_block.is_empty() {
                notes_block.push_str("\n\n");
            }
            notes_block.push_str(&alloc::format!("{code}:\n{notes}"));
        }
        let slots = Slots::new()
            .text("note", text)
            .text(
                "guidelines",
                self.guideline_text(tentative, &mut out.warnings),
            )
            .text("instructional_notes", notes_block)
            .list("code", tentative.iter().map(|c| self.code_line(c)));
        let prompt = match self
            .templates
            .reconciler
            .render(&slots, self.config.decoding)
        {
            Ok(p) => p,
            Err(e) => {
                out.errors.push(e.to_string());
                return out;
            }
        };
        let sel = self.select_ids(TemplateName::Reconciler, prompt, note_id, tentative);
        out.value = sel.ids.iter().map(|&i| tentative[i - 1].clone()).collect();
        out.exchanges = sel.exchanges;
        out.warnings.extend(sel.warnings);
        out.errors.extend(sel.error);
        out.calls = sel.calls;
        out
    }

    /// Runs every configured pass over `note`; the returned trace is the last
    /// pass, with earlier final codes in `scratchpad`.
    pub fn run_note(&self, note: &ClinicalNote) -> CodingRun {
        let passes = self.config.passes.max(1);
        let mut scratchpad: Vec<Vec<CodeId>> = Vec::new();
        let mut text = note.text.clone();
        loop {
            let mut run = self.single_pass(note, &text);
            if let Err(e) = note.validate() {
                run.warnings.insert(0, e.to_string());
            }
            run.passes = passes;
            if scratchpad.len() + 1 >= passes as usize {
                run.scratchpad = scratchpad;
                return run;
            }
            let listed: Vec<String> = run.final_codes.iter().map(|c| c.to_string()).collect();
            text = alloc::format!(
                "{}\n\nCodes assigned in the previous pass: {}",
                note.text,
                listed.join(", ")
            );
            scratchpad.push(run.final_codes);
        }
    }

    fn finish_stage(&self, trace: &mut StageTrace, started: Option<u64>) -> bool {
        let now = self.clock.now_ms();
        if let (Some(start), Some(now)) = (started, now) {
            let elapsed = now.saturating_sub(start);
            trace.elapsed_ms = Some(elapsed);
            if let Some(budget) = self.config.stage_budget_ms {
                if elapsed > budget {
                    trace.errors.push(alloc::format!(
                        "stage budget of {budget} ms exceeded ({elapsed} ms)"
                    ));
                    return false;
                }
            }
        }
        true
    }

    fn single_pass(&self, note: &ClinicalNote, text: &str) -> CodingRun {
        let mut run = CodingRun::empty(&note.id);

        // Stage 1
        let started = self.clock.now_ms();
        let mut trace = StageTrace::new(Stage::Analyze);
        let analyzed = self.analyze(note, text);
        trace.exchanges = analyzed.exchanges;
        trace.errors = analyzed.errors;
        run.warnings.extend(analyzed.warnings);
        run.backend_calls += analyzed.calls;
        let mut snippets = Vec::new();
        for s in analyzed.value {
            if !snippets.contains(&s) {
                snippets.push(s);
            }
        }
        if !self.finish_stage(&mut trace, started) {
            snippets.clear();
        }
        run.stages.push(trace);

        // Stage 2
        let started = self.clock.now_ms();
        let mut trace = StageTrace::new(Stage::Locate);
        let located = self.executor.map(&snippets, |s| self.locate(&note.id, s));
        for outcome in located {
            trace.exchanges.extend(outcome.exchanges);
            trace.errors.extend(outcome.errors);
            run.warnings.extend(outcome.warnings);
            run.backend_calls += outcome.calls;
            run.retrieved.push(outcome.retrieved);
            run.navigator_selected.push(outcome.selected);
        }
        run.snippets = snippets;
        if !self.finish_stage(&mut trace, started) {
            run.navigator_selected.iter_mut().for_each(Vec::clear);
        }
        run.stages.push(trace);

        // Stage 3
        let started = self.clock.now_ms();
        let mut trace = StageTrace::new(Stage::Assign);
        let selected: BTreeSet<CodeId> = run.stage_codes(Stage::Locate);
        run.chapter_groups = group_by_chapter(&selected);
        let groups: Vec<Vec<CodeId>> = run.chapter_groups.values().cloned().collect();
        let assigned = self
            .executor
            .map(&groups, |g| self.assign(&note.id, text, g));
        let mut tentative = BTreeSet::new();
        for outcome in assigned {
            trace.exchanges.extend(outcome.exchanges);
            trace.errors.extend(outcome.errors);
            run.warnings.extend(outcome.warnings);
            run.backend_calls += outcome.calls;
            tentative.extend(outcome.code);
        }
        for code in &tentative {
            match self.taxonomy.is_leaf(code) {
                Ok(true) => {}
                Ok(false) => run
                    .warnings
                    .push(alloc::format!("tentative code {code} is not a leaf")),
                Err(_) => run.warnings.push(alloc::format!(
                    "tentative code {code} is not in the hierarchy"
                )),
            }
        }
        run.tentative = tentative.into_iter().collect();
        if !self.finish_stage(&mut trace, started) {
            run.tentative.clear();
        }
        run.stages.push(trace);

        // Stage 4
        let started = self.clock.now_ms();
        let mut trace = StageTrace::new(Stage::Verify);
        let reconciled = self.reconcile(&note.id, text, &run.tentative);
        trace.exchanges = reconciled.exchanges;
        trace.errors = reconciled.errors;
        run.warnings.extend(reconciled.warnings);
        run.backend_calls += reconciled.calls;
        run.final_codes = reconciled.value;
        if !self.finish_stage(&mut trace, started) {
            run.final_codes.clear();
        }
        run.stages.push(trace);
        run
    }
}
