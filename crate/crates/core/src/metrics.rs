//! Set-based multi-label evaluation: micro/macro F1, exact match ratio,
//! per-stage scoring of pipeline traces and chapter-level recall@k.
//!
//! Predicted code order and duplicates never matter; every prediction is a
//! set. Scoring is generic over the label type so it can be exercised with
//! plain integers as well as [`CodeId`]s.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::code::{Chapter, CodeId};
use crate::pipeline::{ClinicalNote, CodingRun, Stage};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("nothing to evaluate")]
    EmptyInput,
    #[error("run for note `{note}` has no {stage} stage")]
    MissingStage { note: String, stage: Stage },
    #[error("run refers to unknown note `{0}`")]
    UnknownNote(String),
    #[error("duplicate note id `{0}`")]
    DuplicateNote(String),
}

/// Predicted and gold label sets of one note.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prediction<L> {
    pub predicted: BTreeSet<L>,
    pub gold: BTreeSet<L>,
}

impl<L: Ord> Prediction<L> {
    pub fn new<P, G>(predicted: P, gold: G) -> Self
    where
        P: IntoIterator<Item = L>,
        G: IntoIterator<Item = L>,
    {
        Self {
            predicted: predicted.into_iter().collect(),
            gold: gold.into_iter().collect(),
        }
    }
}

/// Which labels macro F1 averages over.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum LabelUniverse<L> {
    /// Labels occurring in gold or predictions.
    #[default]
    Observed,
    /// A fixed list; listed labels that never occur score 0 and labels
    /// outside the list are ignored by macro F1.
    Fixed(BTreeSet<L>),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LabelScore {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

impl LabelScore {
    fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        Self {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1: harmonic(precision, recall),
        }
    }
}

/// Metric bundle for one prediction set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport<L: Ord> {
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub emr: f64,
    /// Micro precision.
    pub precision: f64,
    /// Micro recall.
    pub recall: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub n_notes: usize,
    pub n_labels: usize,
    pub per_label: BTreeMap<L, LabelScore>,
}

/// Pooled and per-label scores.
///
/// With no label decisions at all (every gold and predicted set empty)
/// precision, recall and both F1s are 1, so a perfect EMR always comes with
/// a perfect micro F1.
pub fn micro_macro<L: Ord + Clone>(
    preds: &[Prediction<L>],
    universe: &LabelUniverse<L>,
) -> Result<EvalReport<L>, MetricsError> {
    if preds.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut counts: BTreeMap<L, (u64, u64, u64)> = BTreeMap::new();
    for p in preds {
        for l in p.predicted.union(&p.gold) {
            let c = counts.entry(l.clone()).or_default();
            match (p.predicted.contains(l), p.gold.contains(l)) {
                (true, true) => c.0 += 1,
                (true, false) => c.1 += 1,
                _ => c.2 += 1,
            }
        }
    }
    let per_label: BTreeMap<L, LabelScore> = counts
        .iter()
        .map(|(l, &(tp, fp, fn_))| (l.clone(), LabelScore::from_counts(tp, fp, fn_)))
        .collect();
    let (tp, fp, fn_) = counts
        .values()
        .fold((0, 0, 0), |a, c| (a.0 + c.0, a.1 + c.1, a.2 + c.2));

    let (precision, recall, micro_f1) = if tp + fp + fn_ == 0 {
        (1.0, 1.0, 1.0)
    } else {
        let p = ratio(tp, tp + fp);
        let r = ratio(tp, tp + fn_);
        (p, r, harmonic(p, r))
    };

    let macro_scores: Vec<f64> = match universe {
        LabelUniverse::Observed => per_label.values().map(|s| s.f1).collect(),
        LabelUniverse::Fixed(labels) => labels
            .iter()
            .map(|l| per_label.get(l).map_or(0.0, |s| s.f1))
            .collect(),
    };
    let macro_f1 = if macro_scores.is_empty() {
        if tp + fp + fn_ == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        macro_scores.iter().sum::<f64>() / macro_scores.len() as f64
    };

    Ok(EvalReport {
        micro_f1,
        macro_f1,
        emr: emr(preds)?,
        precision,
        recall,
        tp,
        fp,
        fn_,
        n_notes: preds.len(),
        n_labels: per_label.len(),
        per_label,
    })
}

/// Share of notes whose predicted set equals the gold set.
pub fn emr<L: Ord>(preds: &[Prediction<L>]) -> Result<f64, MetricsError> {
    if preds.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let exact = preds.iter().filter(|p| p.predicted == p.gold).count();
    Ok(exact as f64 / preds.len() as f64)
}

/// How per-stage outputs are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageScoring {
    /// Each stage's implied code set against the full gold set.
    #[default]
    Cumulative,
    /// Gold is restricted to codes the previous stage still offered, so a
    /// stage is not charged for earlier losses.
    Filtered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub report: EvalReport<CodeId>,
}

/// Notes keyed by id, rejecting duplicates.
pub fn notes_by_id(notes: &[ClinicalNote]) -> Result<BTreeMap<&str, &ClinicalNote>, MetricsError> {
    let mut map = BTreeMap::new();
    for n in notes {
        if map.insert(n.id.as_str(), n).is_some() {
            return Err(MetricsError::DuplicateNote(n.id.clone()));
        }
    }
    Ok(map)
}

/// Final-stage predictions of `runs` paired with gold from `notes`.
pub fn final_predictions(
    runs: &[CodingRun],
    notes: &[ClinicalNote],
) -> Result<Vec<Prediction<CodeId>>, MetricsError> {
    let by_id = notes_by_id(notes)?;
    runs.iter()
        .map(|run| {
            let note = by_id
                .get(run.note_id.as_str())
                .ok_or_else(|| MetricsError::UnknownNote(run.note_id.clone()))?;
            Ok(Prediction {
                predicted: run.stage_codes(Stage::Verify),
                gold: note.gold_codes(),
            })
        })
        .collect()
}

/// One report per stage, in stage order.
pub fn stage_eval(
    runs: &[CodingRun],
    notes: &[ClinicalNote],
    scoring: StageScoring,
) -> Result<Vec<StageReport>, MetricsError> {
    if runs.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let by_id = notes_by_id(notes)?;
    let mut per_stage: Vec<Vec<Prediction<CodeId>>> =
        Stage::ALL.iter().map(|_| Vec::new()).collect();
    for run in runs {
        let note = by_id
            .get(run.note_id.as_str())
            .ok_or_else(|| MetricsError::UnknownNote(run.note_id.clone()))?;
        let mut gold = note.gold_codes();
        for (i, &stage) in Stage::ALL.iter().enumerate() {
            if run.stage(stage).is_none() {
                return Err(MetricsError::MissingStage {
                    note: run.note_id.clone(),
                    stage,
                });
            }
            let predicted = run.stage_codes(stage);
            per_stage[i].push(Prediction {
                predicted: predicted.clone(),
                gold: gold.clone(),
            });
            if scoring == StageScoring::Filtered {
                gold = gold.intersection(&predicted).cloned().collect();
            }
        }
    }
    Stage::ALL
        .iter()
        .zip(per_stage)
        .map(|(&stage, preds)| {
            Ok(StageReport {
                stage,
                report: micro_macro(&preds, &LabelUniverse::Observed)?,
            })
        })
        .collect()
}

/// Queries of one note for the chapter recall comparison.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecallQueries<'a> {
    pub gold: BTreeSet<CodeId>,
    /// Stage-1 snippets produced by the pipeline.
    pub snippets: &'a [String],
    /// Gold evidence texts; `None` when the note has no evidence spans.
    pub evidence: Option<Vec<String>>,
}

impl<'a> RecallQueries<'a> {
    pub fn from_run(note: &ClinicalNote, run: &'a CodingRun) -> Self {
        let evidence = note
            .gold_evidence
            .as_ref()
            .filter(|spans| !spans.is_empty())
            .map(|_| note.evidence_texts());
        Self {
            gold: note.gold_codes(),
            snippets: &run.snippets,
            evidence,
        }
    }
}

/// One point of the chapter comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChapterRecall {
    pub chapter: Chapter,
    pub n_gold: u64,
    /// Recall@k with the pipeline's snippets as queries.
    pub agent_recall: f64,
    /// Recall@k with gold evidence spans as queries.
    pub evidence_recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChapterRecallTable {
    pub k: usize,
    pub chapters: Vec<ChapterRecall>,
    /// Notes skipped because they carry no gold evidence.
    pub skipped_no_evidence: usize,
}

/// Per-chapter recall of gold codes covered by the union of the top-k codes
/// over a note's queries. `retrieve` returns the codes of the top-k entries
/// for one query.
pub fn chapter_recall<F, E>(
    notes: &[RecallQueries<'_>],
    k: usize,
    mut retrieve: F,
) -> Result<ChapterRecallTable, E>
where
    F: FnMut(&str, usize) -> Result<BTreeSet<CodeId>, E>,
{
    let mut tally: BTreeMap<Chapter, (u64, u64, u64)> = BTreeMap::new();
    let mut skipped = 0;
    for note in notes {
        let Some(evidence) = &note.evidence else {
            skipped += 1;
            continue;
        };
        let mut covered =
            |queries: &mut dyn Iterator<Item = &String>| -> Result<BTreeSet<CodeId>, E> {
                let mut codes = BTreeSet::new();
                for q in queries {
                    codes.extend(retrieve(q, k)?);
                }
                Ok(codes)
            };
        let by_agent = covered(&mut note.snippets.iter())?;
        let by_evidence = covered(&mut evidence.iter())?;
        for code in &note.gold {
            let t = tally.entry(*code.chapter()).or_default();
            t.0 += 1;
            t.1 += u64::from(by_agent.contains(code));
            t.2 += u64::from(by_evidence.contains(code));
        }
    }
    Ok(ChapterRecallTable {
        k,
        chapters: tally
            .into_iter()
            .map(|(chapter, (n, a, e))| ChapterRecall {
                chapter,
                n_gold: n,
                agent_recall: ratio(a, n),
                evidence_recall: ratio(e, n),
            })
            .collect(),
        skipped_no_evidence: skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn p(pred: &[&'static str], gold: &[&'static str]) -> Prediction<&'static str> {
        Prediction::new(pred.iter().copied(), gold.iter().copied())
    }

    #[test]
    fn one_note_half() {
        let r = micro_macro(&[p(&["A", "C"], &["A", "B"])], &LabelUniverse::Observed).unwrap();
        assert_eq!((r.precision, r.recall, r.micro_f1), (0.5, 0.5, 0.5));
        // A: f1 1, B: 0, C: 0
        assert!((r.macro_f1 - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.emr, 0.0);
    }

    #[test]
    fn perfect_and_empty() {
        let r = micro_macro(&[p(&["A"], &["A"]), p(&[], &[])], &LabelUniverse::Observed).unwrap();
        assert_eq!((r.micro_f1, r.macro_f1, r.emr), (1.0, 1.0, 1.0));
        let none = micro_macro(&[p(&[], &[])], &LabelUniverse::Observed).unwrap();
        assert_eq!((none.micro_f1, none.macro_f1, none.emr), (1.0, 1.0, 1.0));
        assert_eq!(
            micro_macro::<&str>(&[], &LabelUniverse::Observed),
            Err(MetricsError::EmptyInput)
        );
    }

    #[test]
    fn emr_examples() {
        assert_eq!(emr(&[p(&["A"], &["A"]), p(&["A"], &["B"])]).unwrap(), 0.5);
        assert_eq!(emr(&[p(&[], &["A"]), p(&[], &["B"])]).unwrap(), 0.0);
        assert_eq!(emr(&[p(&[], &[])]).unwrap(), 1.0);
        assert_eq!(emr::<u8>(&[]), Err(MetricsError::EmptyInput));
    }

    #[test]
    fn fixed_universe() {
        let preds = [p(&["A"], &["A"])];
        let fixed = LabelUniverse::Fixed(BTreeSet::from(["A", "Z"]));
        assert_eq!(micro_macro(&preds, &fixed).unwrap().macro_f1, 0.5);
    }

    fn chapter_row<'a>(t: &'a ChapterRecallTable, label: &str) -> &'a ChapterRecall {
        t.chapters
            .iter()
            .find(|c| c.chapter.label == label)
            .unwrap()
    }

    #[test]
    fn chapter_recall_hand_table() {
        let c = |s: &str| CodeId::parse(s).unwrap();
        // Two chapters with three gold codes each; the retriever answers
        // every query with the codes named in it.
        let snippets_a = vec!["A01.0 A02.0".to_string()];
        let snippets_b: Vec<String> = vec![];
        let notes = [
            RecallQueries {
                gold: BTreeSet::from([c("A01.0"), c("A02.0"), c("J18.9")]),
                snippets: &snippets_a,
                evidence: Some(vec!["A01.0".into(), "J18.9".into()]),
            },
            RecallQueries {
                gold: BTreeSet::from([c("A03.0"), c("J45.0"), c("J44.9")]),
                snippets: &snippets_b,
                evidence: Some(vec!["A03.0 J45.0 J44.9".into()]),
            },
            RecallQueries {
                gold: BTreeSet::from([c("A04.0")]),
                snippets: &snippets_a,
                evidence: None,
            },
        ];
        let table = chapter_recall(&notes, 25, |q, _| -> Result<_, ()> {
            Ok(q.split(' ').map(c).collect())
        })
        .unwrap();
        assert_eq!(table.skipped_no_evidence, 1);
        let a = chapter_row(&table, "A00\u{2013}B99");
        assert_eq!(
            (a.n_gold, a.agent_recall, a.evidence_recall),
            (3, 2.0 / 3.0, 2.0 / 3.0)
        );
        let j = chapter_row(&table, "J00\u{2013}J99");
        assert_eq!((j.n_gold, j.agent_recall, j.evidence_recall), (3, 0.0, 1.0));
    }
}
