//! Controlled analyses of the code-choosing stages: hard-negative candidate
//! sets, F1 against the number of negatives, context ablation and decoding
//! mode comparison.
//!
//! Each cell runs stage 3 (per-chapter single choice) and stage 4 (multi
//! choice) directly on a candidate set built from gold codes and their
//! nearest neighbours in description-embedding space, bypassing evidence
//! extraction and retrieval.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, Decoding};
use crate::code::CodeId;
use crate::metrics::{micro_macro, LabelUniverse, MetricsError, Prediction};
use crate::pipeline::{
    group_by_chapter, ClinicalNote, ContextLevel, Exchange, Executor, Pipeline, Stage,
};
use crate::retrieval::{DenseIndex, Embedder, HnswParams, RetrievalError};
use crate::taxonomy::Taxonomy;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExperimentError {
    #[error("gold set is empty")]
    EmptyGold,
    #[error("code {0} is not in the description corpus")]
    NotInCorpus(String),
    #[error("description corpus is empty")]
    EmptyCorpus,
    #[error("no K values given")]
    NoKValues,
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Codes embedded by their descriptions, in ascending code order.
#[derive(Debug, Clone)]
pub struct CodeSpace {
    codes: Vec<CodeId>,
    index: DenseIndex,
}

impl CodeSpace {
    /// Embeds `(code, description)` pairs. Duplicate codes keep the first
    /// description.
    pub fn build<I>(
        items: I,
        embedder: &dyn Embedder,
        params: HnswParams,
    ) -> Result<Self, ExperimentError>
    where
        I: IntoIterator<Item = (CodeId, String)>,
    {
        let mut items: Vec<(CodeId, String)> = items.into_iter().collect();
        items.sort_by(|a, b| a.0.cmp(&b.0));
        items.dedup_by(|b, a| a.0 == b.0);
        if items.is_empty() {
            return Err(ExperimentError::EmptyCorpus);
        }
        let vectors = items
            .iter()
            .map(|(_, d)| embedder.embed(d))
            .collect::<Result<Vec<_>, _>>()?;
        let index = DenseIndex::build(embedder.dim(), vectors, params)?;
        Ok(Self {
            codes: items.into_iter().map(|(c, _)| c).collect(),
            index,
        })
    }

    /// All leaf codes of `taxonomy`.
    pub fn from_taxonomy(
        taxonomy: &Taxonomy,
        embedder: &dyn Embedder,
        params: HnswParams,
    ) -> Result<Self, ExperimentError> {
        let items = taxonomy.assignable_codes().into_iter().map(|c| {
            let desc = taxonomy.description(&c).unwrap_or_default().to_string();
            (c, desc)
        });
        Self::build(items, embedder, params)
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn codes(&self) -> &[CodeId] {
        &self.codes
    }

    pub fn vector(&self, code: &CodeId) -> Option<&[f32]> {
        let pos = self.codes.binary_search(code).ok()?;
        Some(self.index.vector(pos as u32))
    }

    /// Every other code, nearest first; ties by ascending code. The search
    /// beam covers the whole corpus, so the order is exact.
    pub fn neighbours(&self, code: &CodeId) -> Result<Vec<CodeId>, ExperimentError> {
        let pos = self
            .codes
            .binary_search(code)
            .map_err(|_| ExperimentError::NotInCorpus(code.to_string()))?;
        let n = self.codes.len();
        let ranking = self.index.topk(self.index.vector(pos as u32), n, n)?;
        Ok(ranking
            .hits
            .iter()
            .filter(|h| h.id as usize != pos)
            .map(|h| self.codes[h.id as usize].clone())
            .collect())
    }
}

/// `combined = positives ∪ negatives` with `negatives ∩ positives = ∅`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub positives: BTreeSet<CodeId>,
    pub negatives: BTreeSet<CodeId>,
    pub k: usize,
    pub combined: BTreeSet<CodeId>,
    /// The corpus had fewer than `k·|positives|` distinct non-gold codes.
    pub shortfall: bool,
}

/// Takes each positive's `k` nearest non-gold codes, unions them, then tops
/// up round-robin over the positives from their next-nearest codes until
/// there are `k·|gold|` negatives or the corpus runs out.
pub fn build_candidate_set(
    space: &CodeSpace,
    gold: &BTreeSet<CodeId>,
    k: usize,
) -> Result<CandidateSet, ExperimentError> {
    if gold.is_empty() {
        return Err(ExperimentError::EmptyGold);
    }
    let lists: Vec<Vec<CodeId>> = gold
        .iter()
        .map(|p| {
            Ok(space
                .neighbours(p)?
                .into_iter()
                .filter(|c| !gold.contains(c))
                .collect())
        })
        .collect::<Result<_, ExperimentError>>()?;
    let target = k * gold.len();
    let mut negatives: BTreeSet<CodeId> = lists
        .iter()
        .flat_map(|l| l.iter().take(k).cloned())
        .collect();
    let mut cursors: Vec<usize> = lists.iter().map(|l| k.min(l.len())).collect();
    'top_up: while negatives.len() < target {
        let mut progressed = false;
        for (list, cursor) in lists.iter().zip(cursors.iter_mut()) {
            while *cursor < list.len() && negatives.contains(&list[*cursor]) {
                *cursor += 1;
            }
            if *cursor < list.len() {
                negatives.insert(list[*cursor].clone());
                *cursor += 1;
                progressed = true;
                if negatives.len() == target {
                    break 'top_up;
                }
            }
        }
        if !progressed {
            break;
        }
    }
    let combined = gold.union(&negatives).cloned().collect();
    Ok(CandidateSet {
        positives: gold.clone(),
        shortfall: negatives.len() < target,
        negatives,
        k,
        combined,
    })
}

/// One experimental condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arm {
    pub context: ContextLevel,
    pub decoding: Decoding,
}

impl Arm {
    pub fn name(&self) -> String {
        alloc::format!("{}/{}", self.context.as_str(), self.decoding)
    }
}

/// Stage 3 and stage 4 scores of one arm at one K.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub arm: String,
    pub stage: Stage,
    #[serde(rename = "K")]
    pub k: usize,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub n_notes: usize,
    /// Notes with at least one stage error in this cell.
    pub errors: usize,
    /// Responses that violated the constrained output language.
    pub unparseable: usize,
    /// Notes whose candidate set fell short of `(K+1)·|P|`.
    pub shortfalls: usize,
}

impl CurvePoint {
    /// Curve key: arm plus stage.
    pub fn series(&self) -> String {
        alloc::format!("{}/{}", self.arm, self.stage)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoteFailure {
    pub note_id: String,
    pub arm: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    #[serde(rename = "K")]
    pub ks: Vec<usize>,
    pub arms: Vec<Arm>,
    pub points: Vec<CurvePoint>,
    pub failures: Vec<NoteFailure>,
}

struct Cell {
    stage3: Prediction<CodeId>,
    stage4: Prediction<CodeId>,
    errored: bool,
    unparseable: usize,
    shortfall: bool,
}

fn count_unparseable(exchanges: &[Exchange]) -> usize {
    exchanges
        .iter()
        .filter(|e| e.response.is_some() && e.error.is_some())
        .count()
}

fn run_cell<B: Backend, E: Executor>(
    pipeline: &Pipeline<'_, B, E>,
    space: &CodeSpace,
    note: &ClinicalNote,
    k: usize,
) -> Result<Cell, ExperimentError> {
    let gold = note.gold_codes();
    let set = build_candidate_set(space, &gold, k)?;
    let candidates: Vec<CodeId> = set.combined.iter().cloned().collect();

    let mut errored = false;
    let mut unparseable = 0;
    let mut tentative = BTreeSet::new();
    for group in group_by_chapter(&candidates).values() {
        let out = pipeline.assign(&note.id, &note.text, group);
        errored |= !out.errors.is_empty();
        unparseable += count_unparseable(&out.exchanges);
        tentative.extend(out.code);
    }
    let verified = pipeline.reconcile(&note.id, &note.text, &candidates);
    errored |= !verified.errors.is_empty();
    unparseable += count_unparseable(&verified.exchanges);

    Ok(Cell {
        stage3: Prediction {
            predicted: tentative,
            gold: gold.clone(),
        },
        stage4: Prediction::new(verified.value, gold),
        errored,
        unparseable,
        shortfall: set.shortfall,
    })
}

/// Runs every (arm, K) cell over `notes` and scores stages 3 and 4. Notes
/// without gold codes are skipped and listed as failures; a failing note
/// never stops the sweep.
pub fn sweep<B: Backend, E: Executor>(
    experiment: &str,
    pipeline: &Pipeline<'_, B, E>,
    space: &CodeSpace,
    notes: &[ClinicalNote],
    ks: &[usize],
    arms: &[Arm],
) -> Result<ExperimentReport, ExperimentError> {
    if ks.is_empty() {
        return Err(ExperimentError::NoKValues);
    }
    let mut report = ExperimentReport {
        experiment: experiment.into(),
        ks: ks.to_vec(),
        arms: arms.to_vec(),
        points: Vec::new(),
        failures: Vec::new(),
    };
    for arm in arms {
        let mut config = pipeline.config.clone();
        config.context = arm.context;
        config.decoding = arm.decoding;
        let arm_pipeline = pipeline.with_config(config);
        for &k in ks {
            let cells = pipeline
                .executor
                .map(notes, |note| run_cell(&arm_pipeline, space, note, k));
            let mut stage3 = Vec::new();
            let mut stage4 = Vec::new();
            let (mut errors, mut unparseable, mut shortfalls) = (0, 0, 0);
            for (note, cell) in notes.iter().zip(cells) {
                match cell {
                    Ok(c) => {
                        errors += usize::from(c.errored);
                        unparseable += c.unparseable;
                        shortfalls += usize::from(c.shortfall);
                        stage3.push(c.stage3);
                        stage4.push(c.stage4);
                    }
                    Err(e) => report.failures.push(NoteFailure {
                        note_id: note.id.clone(),
                        arm: arm.name(),
                        k,
                        message: e.to_string(),
                    }),
                }
            }
            for (stage, preds) in [(Stage::Assign, stage3), (Stage::Verify, stage4)] {
                let scores = micro_macro(&preds, &LabelUniverse::Observed)?;
                report.points.push(CurvePoint {
                    arm: arm.name(),
                    stage,
                    k,
                    micro_f1: scores.micro_f1,
                    macro_f1: scores.macro_f1,
                    n_notes: preds.len(),
                    errors,
                    unparseable,
                    shortfalls,
                });
            }
        }
    }
    Ok(report)
}

/// F1 against K for one arm.
pub fn candidate_scaling_run<B: Backend, E: Executor>(
    pipeline: &Pipeline<'_, B, E>,
    space: &CodeSpace,
    notes: &[ClinicalNote],
    ks: &[usize],
    arm: Arm,
) -> Result<ExperimentReport, ExperimentError> {
    sweep("candidate-scaling", pipeline, space, notes, ks, &[arm])
}

/// One arm per context level, all under the pipeline's decoding mode.
pub fn context_ablation_run<B: Backend, E: Executor>(
    pipeline: &Pipeline<'_, B, E>,
    space: &CodeSpace,
    notes: &[ClinicalNote],
    ks: &[usize],
    levels: &[ContextLevel],
) -> Result<ExperimentReport, ExperimentError> {
    let arms: Vec<Arm> = levels
        .iter()
        .map(|&context| Arm {
            context,
            decoding: pipeline.config.decoding,
        })
        .collect();
    sweep("context-ablation", pipeline, space, notes, ks, &arms)
}

/// Paired thinking and constrained arms under the pipeline's context level.
pub fn decoding_mode_run<B: Backend, E: Executor>(
    pipeline: &Pipeline<'_, B, E>,
    space: &CodeSpace,
    notes: &[ClinicalNote],
    ks: &[usize],
) -> Result<ExperimentReport, ExperimentError> {
    let arms: Vec<Arm> = [Decoding::Thinking, Decoding::Constrained]
        .into_iter()
        .map(|decoding| Arm {
            context: pipeline.config.context,
            decoding,
        })
        .collect();
    sweep("decoding", pipeline, space, notes, ks, &arms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::HashEmbedder;

    fn space() -> CodeSpace {
        let items = [
            ("A01.0", "typhoid fever"),
            ("A01.1", "paratyphoid fever A"),
            ("A02.0", "salmonella enteritis"),
            ("J18.9", "pneumonia unspecified"),
            ("J18.1", "lobar pneumonia"),
            ("J45.0", "allergic asthma"),
        ];
        CodeSpace::build(
            items
                .iter()
                .map(|(c, d)| (CodeId::parse(c).unwrap(), d.to_string())),
            &HashEmbedder::default(),
            HnswParams::default(),
        )
        .unwrap()
    }

    fn gold(codes: &[&str]) -> BTreeSet<CodeId> {
        codes.iter().map(|c| CodeId::parse(c).unwrap()).collect()
    }

    #[test]
    fn k_zero_is_gold_only() {
        let s = space();
        let set = build_candidate_set(&s, &gold(&["A01.0"]), 0).unwrap();
        assert_eq!(set.combined, gold(&["A01.0"]));
        assert!(!set.shortfall);
    }

    #[test]
    fn sizes_and_shortfall() {
        let s = space();
        let g = gold(&["A01.0", "J18.9"]);
        let set = build_candidate_set(&s, &g, 2).unwrap();
        assert_eq!(set.combined.len(), 6);
        assert!(set.negatives.is_disjoint(&g));
        let all = build_candidate_set(&s, &g, 3).unwrap();
        assert_eq!(all.negatives.len(), 4);
        assert!(all.shortfall);
    }

    #[test]
    fn errors() {
        let s = space();
        assert_eq!(
            build_candidate_set(&s, &BTreeSet::new(), 1),
            Err(ExperimentError::EmptyGold)
        );
        assert!(matches!(
            build_candidate_set(&s, &gold(&["Z99.9"]), 1),
            Err(ExperimentError::NotInCorpus(_))
        ));
    }
}
