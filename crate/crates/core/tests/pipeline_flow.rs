use std::collections::BTreeSet;

use clh_core::backend::{
    Backend, BackendError, Decoding, GenerationRequest, GenerationResult, OracleBackend,
    ScriptedBackend, TemplateSet,
};
use clh_core::metrics::{stage_eval, StageScoring};
use clh_core::pipeline::{
    ClinicalNote, ContextLevel, EvidenceSource, EvidenceSpan, NoClock, Pipeline, PipelineConfig,
    Sequential, Stage,
};
use clh_core::retrieval::{HashEmbedder, RetrievalConfig, TermIndex};
use clh_core::taxonomy::{
    build_alpha_index, GuidelineRecord, Guidelines, Hierarchy, IndexRecord, TabularRecord,
};
use clh_core::{CodeId, Taxonomy};

fn rec(code: &str, desc: &str, parent: Option<&str>) -> TabularRecord {
    TabularRecord {
        code: code.into(),
        description: desc.into(),
        parent: parent.map(Into::into),
        notes: Default::default(),
    }
}

fn taxonomy() -> Taxonomy {
    let mut t81 = rec("T81", "Complications of procedures", Some("S00-T88"));
    t81.notes.code_first = vec!["underlying infection".into()];
    let hierarchy = Hierarchy::from_records(vec![
        rec("A00-B99", "Certain infectious and parasitic diseases", None),
        rec("A22", "Anthrax", Some("A00-B99")),
        rec("A22.7", "Anthrax sepsis", Some("A22")),
        rec("A22.9", "Anthrax, unspecified", Some("A22")),
        rec("S00-T88", "Injury, poisoning", None),
        t81,
        rec("T81.4", "Infection following a procedure", Some("T81")),
        rec("T81.44", "Sepsis following a procedure", Some("T81.4")),
        rec("J00-J99", "Diseases of the respiratory system", None),
        rec("J18", "Pneumonia, unspecified organism", Some("J00-J99")),
        rec("J18.9", "Pneumonia, unspecified", Some("J18")),
    ])
    .unwrap();
    let terms: [(&[&str], &str); 5] = [
        (&["Anthrax", "sepsis"], "A22.7"),
        (&["Anthrax"], "A22.9"),
        (&["Sepsis", "postprocedural"], "T81.44"),
        (&["Pneumonia"], "J18.9"),
        (&["Infection", "postprocedural"], "T81.4"),
    ];
    let index = build_alpha_index(terms.iter().map(|(path, code)| IndexRecord {
        term_path: path.iter().map(|s| s.to_string()).collect(),
        code: code.to_string(),
    }))
    .unwrap();
    let guidelines = Guidelines::from_records(vec![GuidelineRecord {
        chapter: "A00-B99".into(),
        text: "Code sepsis due to anthrax to A22.7.".into(),
    }])
    .unwrap();
    Taxonomy::new(hierarchy, index, guidelines)
}

fn code(s: &str) -> CodeId {
    CodeId::parse(s).unwrap()
}

fn note() -> ClinicalNote {
    let text = "Patient developed sepsis postprocedural and has anthrax sepsis.";
    let mut n = ClinicalNote::new("n1", text);
    n.gold = Some(BTreeSet::from([code("A22.7"), code("T81.44")]));
    let span = |c: &str, phrase: &str| {
        let start = text.find(phrase).unwrap();
        EvidenceSpan {
            code: code(c),
            start,
            end: start + phrase.len(),
        }
    };
    n.gold_evidence = Some(vec![
        span("T81.44", "sepsis postprocedural"),
        span("A22.7", "anthrax sepsis"),
    ]);
    n
}

struct Fixture {
    taxonomy: Taxonomy,
    index: TermIndex,
    embedder: HashEmbedder,
    templates: TemplateSet,
}

fn fixture() -> Fixture {
    let taxonomy = taxonomy();
    let embedder = HashEmbedder::default();
    let index = TermIndex::build(
        taxonomy.index.clone(),
        &embedder,
        RetrievalConfig::default(),
    )
    .unwrap();
    Fixture {
        taxonomy,
        index,
        embedder,
        templates: TemplateSet::default(),
    }
}

fn pipeline<'a, B: Backend>(
    f: &'a Fixture,
    backend: &'a B,
    config: PipelineConfig,
) -> Pipeline<'a, B, Sequential> {
    Pipeline {
        taxonomy: &f.taxonomy,
        index: &f.index,
        embedder: &f.embedder,
        templates: &f.templates,
        backend,
        executor: &Sequential,
        clock: &NoClock,
        config,
    }
}

fn oracle(n: &ClinicalNote) -> OracleBackend {
    let mut o = OracleBackend::new();
    o.add_note(&n.id, n.gold_codes(), n.evidence_texts());
    o
}

#[test]
fn oracle_run_recovers_gold() {
    let f = fixture();
    let n = note();
    let o = oracle(&n);
    for decoding in [Decoding::Thinking, Decoding::Constrained] {
        let config = PipelineConfig {
            k: 5,
            decoding,
            ..Default::default()
        };
        let run = pipeline(&f, &o, config).run_note(&n);
        assert_eq!(run.snippets, ["sepsis postprocedural", "anthrax sepsis"]);
        assert_eq!(run.stage_codes(Stage::Verify), n.gold_codes(), "{decoding}");
        assert_eq!(run.chapter_groups.len(), 2);
        run.check_containment().unwrap();
        assert!(
            run.stages.iter().all(|s| s.errors.is_empty()),
            "{:?}",
            run.stages
        );
    }
}

#[test]
fn gold_spans_skip_the_evidence_call() {
    let f = fixture();
    let n = note();
    let o = oracle(&n);
    let config = PipelineConfig {
        k: 5,
        evidence_source: EvidenceSource::GoldSpans,
        ..Default::default()
    };
    let run = pipeline(&f, &o, config).run_note(&n);
    assert!(run.stage(Stage::Analyze).unwrap().exchanges.is_empty());
    assert_eq!(run.stage_codes(Stage::Verify), n.gold_codes());
}

#[test]
fn cumulative_recall_never_rises() {
    let f = fixture();
    let n = note();
    let o = oracle(&n);
    let run = pipeline(
        &f,
        &o,
        PipelineConfig {
            k: 2,
            ..Default::default()
        },
    )
    .run_note(&n);
    let reports = stage_eval(&[run], &[n], StageScoring::Cumulative).unwrap();
    for pair in reports.windows(2) {
        assert!(pair[0].report.recall >= pair[1].report.recall);
    }
}

/// Answers every prompt from a fixed text.
struct Fixed(&'static str);

impl Backend for Fixed {
    fn generate(&self, _: &GenerationRequest<'_>) -> Result<GenerationResult, BackendError> {
        Ok(GenerationResult::from_raw(self.0))
    }
}

struct Down;

impl Backend for Down {
    fn generate(&self, _: &GenerationRequest<'_>) -> Result<GenerationResult, BackendError> {
        Err(BackendError::Unavailable("connection refused".into()))
    }
}

#[test]
fn malformed_output_yields_empty_selection() {
    let f = fixture();
    let n = note();
    let run = pipeline(&f, &Fixed("no tags here"), PipelineConfig::default()).run_note(&n);
    assert!(run.snippets.is_empty());
    assert!(run.final_codes.is_empty());
    let analyze = run.stage(Stage::Analyze).unwrap();
    assert_eq!(analyze.exchanges.len(), 2, "one retry");
    assert_eq!(analyze.errors.len(), 1);
    run.check_containment().unwrap();
}

#[test]
fn backend_down_is_recorded_per_stage() {
    let f = fixture();
    let n = note();
    let config = PipelineConfig {
        evidence_source: EvidenceSource::GoldSpans,
        ..Default::default()
    };
    let run = pipeline(&f, &Down, config).run_note(&n);
    let locate = run.stage(Stage::Locate).unwrap();
    assert_eq!(locate.errors.len(), 2);
    assert_eq!(locate.exchanges.len(), 2, "no retry on transport errors");
    assert!(run.final_codes.is_empty());
}

#[test]
fn out_of_range_ids_are_dropped_with_warning() {
    let f = fixture();
    let n = note();
    let config = PipelineConfig {
        evidence_source: EvidenceSource::GoldSpans,
        ..Default::default()
    };
    let run = pipeline(&f, &Fixed("<answer>99</answer>"), config).run_note(&n);
    assert!(run.navigator_selected.iter().all(Vec::is_empty));
    assert!(run
        .warnings
        .iter()
        .any(|w| w.contains("out-of-range id 99")));
}

#[test]
fn scripted_replay_matches_recording() {
    let f = fixture();
    let n = note();
    let o = oracle(&n);
    let config = PipelineConfig {
        k: 5,
        ..Default::default()
    };
    let first = pipeline(&f, &o, config.clone()).run_note(&n);

    let mut script = ScriptedBackend::default();
    for stage in &first.stages {
        for ex in &stage.exchanges {
            script.insert(ex.template, &ex.prompt, ex.response.clone().unwrap());
        }
    }
    let replay = pipeline(&f, &script, config).run_note(&n);
    assert_eq!(first, replay);
    assert_eq!(
        serde_json::to_string(&first).unwrap(),
        serde_json::to_string(&replay).unwrap()
    );
}

#[test]
fn second_pass_sees_scratchpad() {
    let f = fixture();
    let n = note();
    let o = oracle(&n);
    let config = PipelineConfig {
        k: 5,
        passes: 2,
        ..Default::default()
    };
    let run = pipeline(&f, &o, config).run_note(&n);
    assert_eq!(run.passes, 2);
    assert_eq!(run.scratchpad.len(), 1);
    let prompt = &run.stage(Stage::Analyze).unwrap().exchanges[0].prompt;
    assert!(prompt.contains("Codes assigned in the previous pass: A22.7, T81.44"));
}

#[test]
fn context_levels_shape_the_validator_prompt() {
    let f = fixture();
    let n = note();
    let o = oracle(&n);
    let group = [code("A22.7"), code("A22.9")];
    let prompt = |context| {
        let p = pipeline(
            &f,
            &o,
            PipelineConfig {
                context,
                ..Default::default()
            },
        );
        p.assign("n1", &n.text, &group).exchanges[0].prompt.clone()
    };
    let ids = prompt(ContextLevel::IdsOnly);
    assert!(ids.contains("Code: A22.7 |") && !ids.contains("Anthrax sepsis"));
    let desc = prompt(ContextLevel::Descriptions);
    assert!(
        desc.contains("Code: A22.7 Anthrax sepsis |")
            && !desc.contains("Code sepsis due to anthrax")
    );
    let full = prompt(ContextLevel::Guidelines);
    assert!(full.contains("Code sepsis due to anthrax to A22.7."));
    assert!(full.contains("====== Guidelines ======"));
}

#[test]
fn reconciler_sees_inherited_notes() {
    let f = fixture();
    let n = note();
    let o = oracle(&n);
    let p = pipeline(&f, &o, PipelineConfig::default());
    let out = p.reconcile("n1", &n.text, &[code("T81.44")]);
    assert!(out.exchanges[0].prompt.contains("underlying infection"));
    assert_eq!(out.value, [code("T81.44")]);
}

#[test]
fn validator_keeps_one_code_per_group() {
    let f = fixture();
    let n = note();
    let p = pipeline(
        &f,
        &Fixed("<answer>2, 1</answer>"),
        PipelineConfig::default(),
    );
    let out = p.assign("n1", &n.text, &[code("A22.7"), code("A22.9")]);
    assert_eq!(out.code, Some(code("A22.9")));
    assert!(out.warnings.iter().any(|w| w.contains("kept the first")));
}
