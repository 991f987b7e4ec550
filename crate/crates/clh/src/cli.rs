//! The `clh` command line.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use clh_core::backend::{Backend, Decoding, TemplateSet};
use clh_core::experiments::{self, Arm, CodeSpace, ExperimentReport};
use clh_core::metrics::{
    self, ChapterRecallTable, EvalReport, LabelUniverse, MetricsError, RecallQueries, StageReport,
    StageScoring,
};
use clh_core::pipeline::{
    Clock, CodingRun, ContextLevel, EvidenceSource, Executor, NoClock, Pipeline, RUN_SCHEMA,
};
use clh_core::retrieval::{Embedder, SearchMode, TermIndex};
use clh_core::{CodeId, Taxonomy};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::backends::{
    build_backend, build_embedder, load_templates, save_script, RecordingBackend,
};
use crate::config::{BackendKind, EmbedderKind, EngineConfig, Env, ProcessEnv};
use crate::data::{self, load_notes, load_taxonomy, TaxonomyPaths, NOTES_FILE};
use crate::exec::{RayonExecutor, SystemClock};
use crate::io::{read_json, read_jsonl, write_atomic, write_json, write_jsonl};
use crate::manifest::RunManifest;
use crate::snapshot::{EmbedderSpec, IndexSnapshot};
use crate::synth::{self, SynthParams};

pub const REPORT_SCHEMA: &str = "clh.report/1";
pub const ARMS_SCHEMA: &str = "clh.arms/1";
pub const RUNS_FILE: &str = "runs.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const PER_LABEL_FILE: &str = "per_label.csv";
pub const CURVES_FILE: &str = "curves.csv";
pub const ARMS_FILE: &str = "arms.json";

/// Exit status for a run that could not reach its backend at all.
const EXIT_SYSTEMIC: u8 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "clh",
    version,
    about = "Staged ICD-10-CM coding over clinical notes"
)]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Errors only.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate the taxonomy files (and optionally notes) and print counts.
    Ingest {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Build or query the alphabetical-index retrieval snapshot.
    #[command(subcommand)]
    Index(IndexCommand),
    /// Code every note and write runs.jsonl.
    Run(RunArgs),
    /// Score runs against gold codes and write report.json.
    Eval(EvalArgs),
    /// Controlled candidate-set experiments; writes curves.csv and arms.json.
    #[command(subcommand)]
    Experiment(ExperimentCommand),
    /// Print a summary of the artifacts in a directory.
    Report {
        /// Directory holding report.json and/or curves.csv.
        dir: PathBuf,
    },
    /// Write a seeded synthetic taxonomy and note set.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = SynthParams::default().seed)]
        seed: u64,
        #[arg(long, default_value_t = SynthParams::default().notes)]
        notes: usize,
        #[arg(long, default_value_t = SynthParams::default().max_gold)]
        max_gold: usize,
    },
}

#[derive(Debug, Subcommand)]
pub enum IndexCommand {
    Build {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        retrieval: RetrievalArgs,
        /// Snapshot path; defaults to `data.index_snapshot`, then `index.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Query {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        retrieval: RetrievalArgs,
        query: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum ExperimentCommand {
    /// F1 against K for the configured arm.
    CandidateScaling(ExperimentArgs),
    /// One arm per context level.
    ContextAblation(ExperimentArgs),
    /// Thinking against constrained decoding.
    Decoding(ExperimentArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct DataArgs {
    /// Directory with tabular.jsonl, alpha_index.jsonl and guidelines.jsonl.
    #[arg(long)]
    pub taxonomy_dir: Option<PathBuf>,
    #[arg(long)]
    pub tabular: Option<PathBuf>,
    #[arg(long)]
    pub alpha_index: Option<PathBuf>,
    #[arg(long)]
    pub guidelines: Option<PathBuf>,
    #[arg(long)]
    pub notes: Option<PathBuf>,
    /// Prebuilt index snapshot.
    #[arg(long)]
    pub index: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct RetrievalArgs {
    #[arg(short, long)]
    pub k: Option<usize>,
    #[arg(long, value_parser = clap::value_parser!(SearchMode))]
    pub mode: Option<SearchMode>,
    #[arg(long)]
    pub ef_search: Option<usize>,
    #[arg(long)]
    pub k_rrf: Option<f64>,
    #[arg(long)]
    pub embedder: Option<EmbedderKind>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvidenceArg {
    Model,
    Gold,
}

#[derive(Debug, Clone, Default, Args)]
pub struct BackendArgs {
    #[arg(long)]
    pub backend: Option<BackendKind>,
    /// Answer table for the scripted backend.
    #[arg(long)]
    pub script: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(Decoding))]
    pub decoding: Option<Decoding>,
    #[arg(long)]
    pub base_url: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Directory of prompt template overrides.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    #[arg(long)]
    pub max_in_flight: Option<usize>,
    /// Also write every backend answer to this answer table.
    #[arg(long)]
    pub record: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub passes: Option<u32>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, value_enum)]
    pub evidence_source: Option<EvidenceArg>,
    #[arg(long, value_parser = clap::value_parser!(ContextLevel))]
    pub context: Option<ContextLevel>,
    #[arg(long)]
    pub parse_retries: Option<u32>,
    #[arg(long)]
    pub stage_budget_ms: Option<u64>,
    /// Record per-stage wall time in traces (makes traces non-reproducible).
    #[arg(long)]
    pub timings: bool,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub retrieval: RetrievalArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScoringArg {
    Cumulative,
    Filtered,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// runs.jsonl, or a directory containing it.
    #[arg(long)]
    pub runs: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub retrieval: RetrievalArgs,
    #[arg(long, value_enum, default_value = "cumulative")]
    pub scoring: ScoringArg,
    /// Also compare recall@K of snippets and gold evidence per chapter.
    #[arg(long, value_name = "K")]
    pub chapter_recall: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ExperimentArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub retrieval: RetrievalArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// Negatives per positive, comma separated.
    #[arg(long = "K", value_delimiter = ',')]
    pub ks: Vec<usize>,
    /// Context levels for the ablation, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = clap::value_parser!(ContextLevel))]
    pub levels: Vec<ContextLevel>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Warn,
        (false, 1) => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
    match execute(cli, &ProcessEnv) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

pub fn execute(cli: Cli, env: &dyn Env) -> anyhow::Result<ExitCode> {
    let mut config = match &cli.config {
        Some(p) => EngineConfig::load(p)?,
        None => EngineConfig::default(),
    };
    config.apply_env(env)?;
    match cli.command {
        Command::Ingest { data } => {
            data.apply(&mut config);
            cmd_ingest(&config)
        }
        Command::Index(IndexCommand::Build {
            data,
            retrieval,
            out,
        }) => {
            data.apply(&mut config);
            retrieval.apply(&mut config);
            config.validate()?;
            cmd_index_build(&config, env, out)
        }
        Command::Index(IndexCommand::Query {
            data,
            retrieval,
            query,
        }) => {
            data.apply(&mut config);
            retrieval.apply(&mut config);
            config.validate()?;
            cmd_index_query(&config, env, &query)
        }
        Command::Run(args) => {
            args.data.apply(&mut config);
            args.retrieval.apply(&mut config);
            args.backend.apply(&mut config);
            args.pipeline.apply(&mut config);
            config.validate()?;
            cmd_run(&config, env, &args.out, args.backend.record.as_deref())
        }
        Command::Eval(args) => {
            args.data.apply(&mut config);
            args.retrieval.apply(&mut config);
            config.validate()?;
            cmd_eval(&config, env, &args)
        }
        Command::Experiment(which) => {
            let (name, args) = match which {
                ExperimentCommand::CandidateScaling(a) => ("candidate-scaling", a),
                ExperimentCommand::ContextAblation(a) => ("context-ablation", a),
                ExperimentCommand::Decoding(a) => ("decoding", a),
            };
            args.data.apply(&mut config);
            args.retrieval.apply(&mut config);
            args.backend.apply(&mut config);
            args.pipeline.apply(&mut config);
            if !args.ks.is_empty() {
                config.experiment.k_values = args.ks.clone();
            }
            if !args.levels.is_empty() {
                config.experiment.context_levels = args.levels.clone();
            }
            config.validate()?;
            cmd_experiment(&config, env, name, &args)
        }
        Command::Report { dir } => cmd_report(&dir),
        Command::Synth {
            out,
            seed,
            notes,
            max_gold,
        } => {
            let fixture = synth::generate(SynthParams {
                seed,
                notes,
                max_gold,
            });
            fixture.write(&out)?;
            println!(
                "wrote {} tabular records, {} index entries, {} guideline docs, {} notes to {}",
                fixture.tabular.len(),
                fixture.index.len(),
                fixture.guidelines.len(),
                fixture.notes.len(),
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

impl DataArgs {
    fn apply(&self, config: &mut EngineConfig) {
        let d = &mut config.data;
        for (flag, field) in [
            (&self.taxonomy_dir, &mut d.taxonomy_dir),
            (&self.tabular, &mut d.tabular),
            (&self.alpha_index, &mut d.alpha_index),
            (&self.guidelines, &mut d.guidelines),
            (&self.notes, &mut d.notes),
            (&self.index, &mut d.index_snapshot),
        ] {
            if flag.is_some() {
                field.clone_from(flag);
            }
        }
    }
}

impl RetrievalArgs {
    fn apply(&self, config: &mut EngineConfig) {
        let r = &mut config.retrieval;
        if let Some(k) = self.k {
            r.k = k;
        }
        if let Some(m) = self.mode {
            r.mode = m;
        }
        if let Some(ef) = self.ef_search {
            r.ef_search = ef;
        }
        if let Some(k) = self.k_rrf {
            r.k_rrf = k;
        }
        if let Some(e) = self.embedder {
            config.embedder.kind = e;
        }
    }
}

impl BackendArgs {
    fn apply(&self, config: &mut EngineConfig) {
        let b = &mut config.backend;
        if let Some(k) = self.backend {
            b.kind = k;
        }
        if self.script.is_some() {
            b.script.clone_from(&self.script);
        }
        if let Some(d) = self.decoding {
            b.decoding = d;
        }
        if let Some(u) = &self.base_url {
            b.base_url.clone_from(u);
        }
        if let Some(m) = &self.model {
            b.model.clone_from(m);
        }
        if self.templates.is_some() {
            b.templates_dir.clone_from(&self.templates);
        }
        if let Some(n) = self.max_in_flight {
            b.max_in_flight = n;
        }
    }
}

impl PipelineArgs {
    fn apply(&self, config: &mut EngineConfig) {
        let p = &mut config.pipeline;
        if let Some(n) = self.passes {
            p.passes = n;
        }
        if let Some(n) = self.workers {
            p.workers = n;
        }
        if let Some(e) = self.evidence_source {
            p.evidence_source = match e {
                EvidenceArg::Model => EvidenceSource::Model,
                EvidenceArg::Gold => EvidenceSource::GoldSpans,
            };
        }
        if let Some(c) = self.context {
            p.context = c;
            config.experiment.context = c;
        }
        if let Some(n) = self.parse_retries {
            p.parse_retries = n;
        }
        if self.stage_budget_ms.is_some() {
            p.stage_budget_ms = self.stage_budget_ms;
        }
        if self.timings {
            p.timings = true;
        }
    }
}

fn taxonomy_paths(config: &EngineConfig) -> TaxonomyPaths {
    let d = &config.data;
    let base = TaxonomyPaths::in_dir(d.taxonomy_dir.as_deref().unwrap_or(Path::new(".")));
    TaxonomyPaths {
        tabular: d.tabular.clone().unwrap_or(base.tabular),
        alpha_index: d.alpha_index.clone().unwrap_or(base.alpha_index),
        guidelines: d.guidelines.clone().unwrap_or(base.guidelines),
    }
}

fn notes_path(config: &EngineConfig) -> PathBuf {
    config.data.notes.clone().unwrap_or_else(|| {
        config
            .data
            .taxonomy_dir
            .as_deref()
            .unwrap_or(Path::new("."))
            .join(NOTES_FILE)
    })
}

fn cmd_ingest(config: &EngineConfig) -> anyhow::Result<ExitCode> {
    let paths = taxonomy_paths(config);
    let mut failed = false;
    let mut report =
        |name: &str, path: &Path, outcome: Result<String, data::DataError>| match outcome {
            Ok(summary) => println!("{name}: {summary} ({})", path.display()),
            Err(e) => {
                println!("{name}: error: {e}");
                failed = true;
            }
        };
    report(
        "tabular",
        &paths.tabular,
        data::load_tabular(&paths.tabular).map(|(h, n)| format!("{n} records, {} nodes", h.len())),
    );
    report(
        "alpha_index",
        &paths.alpha_index,
        data::load_alpha_index(&paths.alpha_index).map(|e| format!("{} entries", e.len())),
    );
    if paths.guidelines.exists() {
        report(
            "guidelines",
            &paths.guidelines,
            data::load_guidelines(&paths.guidelines).map(|(_, n)| format!("{n} chapter documents")),
        );
    } else {
        println!(
            "guidelines: warning: {} not found; continuing without guidelines",
            paths.guidelines.display()
        );
    }
    let notes = notes_path(config);
    if config.data.notes.is_some() || notes.exists() {
        report(
            "notes",
            &notes,
            load_notes(&notes).map(|n| format!("{} notes", n.len())),
        );
    }
    if failed {
        return Ok(ExitCode::FAILURE);
    }
    let (_, loaded) = load_taxonomy(&paths)?;
    for w in loaded.warnings.iter().filter(|w| !w.contains("not found")) {
        println!("warning: {w}");
    }
    Ok(ExitCode::SUCCESS)
}

/// Taxonomy, retrieval index and embedder, ready for a pipeline.
struct Engine {
    taxonomy: Taxonomy,
    index: TermIndex,
    embedder: Box<dyn Embedder>,
    templates: TemplateSet,
}

fn load_engine(
    config: &EngineConfig,
    env: &dyn Env,
    manifest: Option<&mut RunManifest>,
) -> anyhow::Result<Engine> {
    let paths = taxonomy_paths(config);
    let (taxonomy, report) = load_taxonomy(&paths)?;
    for w in &report.warnings {
        warn!("{w}");
    }
    let embedder = build_embedder(&config.embedder, env);
    let spec = EmbedderSpec::of(&config.embedder);
    let index = match &config.data.index_snapshot {
        Some(path) if path.exists() => {
            let snapshot = IndexSnapshot::load(path)?;
            snapshot.check_embedder(&spec)?;
            if snapshot.source_digest != crate::io::file_digest(&paths.alpha_index)? {
                warn!(
                    "{}: built from a different alphabetical index than {}",
                    path.display(),
                    paths.alpha_index.display()
                );
            }
            let mut index = snapshot.index;
            let runtime = config.retrieval.to_core();
            let h = &runtime.hnsw;
            if (h.m, h.ef_construct, h.seed)
                != (
                    index.dense.params.m,
                    index.dense.params.ef_construct,
                    index.dense.params.seed,
                )
                || runtime.bm25 != index.lexical.params
            {
                warn!("{}: index structure parameters differ from the configuration; using the snapshot's", path.display());
            }
            index.config = runtime;
            info!(
                "loaded index snapshot {} ({} entries)",
                path.display(),
                index.len()
            );
            index
        }
        _ => TermIndex::build(
            taxonomy.index.clone(),
            embedder.as_ref(),
            config.retrieval.to_core(),
        )?,
    };
    if let Some(m) = manifest {
        m.add_input("tabular", &paths.tabular)?;
        m.add_input("alpha_index", &paths.alpha_index)?;
        if paths.guidelines.exists() {
            m.add_input("guidelines", &paths.guidelines)?;
        }
        if let Some(p) = config.data.index_snapshot.as_deref().filter(|p| p.exists()) {
            m.add_input("index_snapshot", p)?;
        }
        if config.backend.kind == BackendKind::Scripted {
            if let Some(p) = &config.backend.script {
                m.add_input("script", p)?;
            }
        }
        if let Some(dir) = &config.backend.templates_dir {
            for name in clh_core::backend::TemplateName::ALL {
                let p = dir.join(format!("{name}.txt"));
                if p.exists() {
                    m.add_input(&format!("template:{name}"), &p)?;
                }
            }
        }
    }
    let templates = load_templates(config.backend.templates_dir.as_deref())?;
    Ok(Engine {
        taxonomy,
        index,
        embedder,
        templates,
    })
}

fn cmd_index_build(
    config: &EngineConfig,
    env: &dyn Env,
    out: Option<PathBuf>,
) -> anyhow::Result<ExitCode> {
    let paths = taxonomy_paths(config);
    let entries = data::load_alpha_index(&paths.alpha_index)?;
    let embedder = build_embedder(&config.embedder, env);
    let index = TermIndex::build(entries, embedder.as_ref(), config.retrieval.to_core())?;
    let out = out
        .or_else(|| config.data.index_snapshot.clone())
        .unwrap_or_else(|| PathBuf::from("index.json"));
    let n = index.len();
    IndexSnapshot::new(
        EmbedderSpec::of(&config.embedder),
        crate::io::file_digest(&paths.alpha_index)?,
        index,
    )
    .save(&out)?;
    println!("indexed {n} entries into {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_index_query(config: &EngineConfig, env: &dyn Env, query: &str) -> anyhow::Result<ExitCode> {
    let engine = load_engine(config, env, None)?;
    let hits = engine.index.retrieve_terms(
        engine.embedder.as_ref(),
        query,
        config.retrieval.k,
        config.retrieval.mode,
    )?;
    for (rank, hit) in hits.iter().enumerate() {
        println!(
            "{}\t{:.6}\t{}\t{}",
            rank + 1,
            hit.score,
            hit.entry.code,
            hit.entry.display
        );
    }
    Ok(ExitCode::SUCCESS)
}

/// Whether the backend never answered: every exchange failed before a
/// response came back.
fn backend_never_answered(runs: &[CodingRun]) -> bool {
    let exchanges = || {
        runs.iter()
            .flat_map(|r| &r.stages)
            .flat_map(|s| &s.exchanges)
    };
    exchanges().next().is_some() && exchanges().all(|e| e.response.is_none())
}

fn with_backend<T>(
    config: &EngineConfig,
    env: &dyn Env,
    notes: &[clh_core::pipeline::ClinicalNote],
    record: Option<&Path>,
    f: impl FnOnce(&dyn Backend) -> anyhow::Result<T>,
) -> anyhow::Result<T> {
    let backend = build_backend(&config.backend, notes, env)?;
    match record {
        Some(path) => {
            let recorder = RecordingBackend::new(backend.as_ref());
            let out = f(&recorder)?;
            let records = recorder.records();
            info!("recorded {} answers to {}", records.len(), path.display());
            save_script(path, records)?;
            Ok(out)
        }
        None => f(backend.as_ref()),
    }
}

fn cmd_run(
    config: &EngineConfig,
    env: &dyn Env,
    out: &Path,
    record: Option<&Path>,
) -> anyhow::Result<ExitCode> {
    let mut manifest = RunManifest::begin("run", config);
    let engine = load_engine(config, env, Some(&mut manifest))?;
    let notes_file = notes_path(config);
    let notes = load_notes(&notes_file)?;
    manifest.add_input("notes", &notes_file)?;
    if notes.is_empty() {
        bail!("{}: no notes", notes_file.display());
    }
    let executor = RayonExecutor::new(config.pipeline.workers)?;
    let system_clock = SystemClock::default();
    let clock: &dyn Clock = if config.pipeline.timings {
        &system_clock
    } else {
        &NoClock
    };

    let mut runs = with_backend(config, env, &notes, record, |backend| {
        let pipeline = Pipeline {
            taxonomy: &engine.taxonomy,
            index: &engine.index,
            embedder: engine.embedder.as_ref(),
            templates: &engine.templates,
            backend: &backend,
            executor: &executor,
            clock,
            config: config.pipeline_config(),
        };
        Ok(executor.map(&notes, |note| pipeline.run_note(note)))
    })?;
    for run in &mut runs {
        run.manifest = Some(manifest.hash.clone());
        if let Err(e) = run.check_containment() {
            warn!("note {}: {e}", run.note_id);
        }
    }
    let with_errors = runs
        .iter()
        .filter(|r| r.stages.iter().any(|s| !s.errors.is_empty()))
        .count();
    write_jsonl(&out.join(RUNS_FILE), &runs)?;
    manifest.finish();
    write_json(&out.join("runs.manifest.json"), &manifest)?;
    println!(
        "coded {} notes into {} ({} with stage errors)",
        runs.len(),
        out.join(RUNS_FILE).display(),
        with_errors
    );
    if backend_never_answered(&runs) {
        eprintln!("error: the backend did not answer any request");
        return Ok(ExitCode::from(EXIT_SYSTEMIC));
    }
    Ok(ExitCode::SUCCESS)
}

/// Recall of gold codes within everything the locate stage retrieved; the
/// ceiling for any backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalBound {
    pub gold: u64,
    pub retrieved: u64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub schema: String,
    pub manifest: String,
    /// Manifest hashes found in the evaluated runs.
    pub runs_manifests: Vec<String>,
    pub scoring: StageScoring,
    #[serde(rename = "final")]
    pub final_report: EvalReport<CodeId>,
    pub stages: Vec<StageReport>,
    pub retrieval_bound: RetrievalBound,
    /// Notes with at least one stage error.
    pub notes_with_errors: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chapter_recall: Option<ChapterRecallTable>,
}

fn runs_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(RUNS_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn retrieval_bound(
    runs: &[CodingRun],
    notes: &[clh_core::pipeline::ClinicalNote],
) -> Result<RetrievalBound, MetricsError> {
    let by_id = metrics::notes_by_id(notes)?;
    let (mut gold, mut hit) = (0u64, 0u64);
    for run in runs {
        let note = by_id
            .get(run.note_id.as_str())
            .ok_or_else(|| MetricsError::UnknownNote(run.note_id.clone()))?;
        let retrieved: BTreeSet<&CodeId> =
            run.retrieved.iter().flatten().map(|e| &e.code).collect();
        let g = note.gold_codes();
        gold += g.len() as u64;
        hit += g.iter().filter(|c| retrieved.contains(c)).count() as u64;
    }
    Ok(RetrievalBound {
        gold,
        retrieved: hit,
        recall: if gold == 0 {
            1.0
        } else {
            hit as f64 / gold as f64
        },
    })
}

fn cmd_eval(config: &EngineConfig, env: &dyn Env, args: &EvalArgs) -> anyhow::Result<ExitCode> {
    let mut manifest = RunManifest::begin("eval", config);
    let runs_path = runs_file(&args.runs);
    let runs: Vec<CodingRun> = read_jsonl(&runs_path)?;
    manifest.add_input("runs", &runs_path)?;
    if let Some(bad) = runs.iter().find(|r| r.schema != RUN_SCHEMA) {
        bail!(
            "{}: run for `{}` has schema `{}`, expected `{RUN_SCHEMA}`",
            runs_path.display(),
            bad.note_id,
            bad.schema
        );
    }
    let notes_file = notes_path(config);
    let notes = load_notes(&notes_file)?;
    manifest.add_input("notes", &notes_file)?;

    let scoring = match args.scoring {
        ScoringArg::Cumulative => StageScoring::Cumulative,
        ScoringArg::Filtered => StageScoring::Filtered,
    };
    let final_preds = metrics::final_predictions(&runs, &notes)?;
    let final_report = metrics::micro_macro(&final_preds, &LabelUniverse::Observed)
        .context("no runs to evaluate")?;
    let stages = metrics::stage_eval(&runs, &notes, scoring)?;

    let chapter_recall = match args.chapter_recall {
        Some(k) => {
            let engine = load_engine(config, env, Some(&mut manifest))?;
            let by_id = metrics::notes_by_id(&notes)?;
            let queries: Vec<RecallQueries<'_>> = runs
                .iter()
                .filter_map(|r| {
                    by_id
                        .get(r.note_id.as_str())
                        .map(|n| RecallQueries::from_run(n, r))
                })
                .collect();
            Some(metrics::chapter_recall(&queries, k, |q, k| {
                engine
                    .index
                    .retrieved_codes(engine.embedder.as_ref(), q, k, config.retrieval.mode)
            })?)
        }
        None => None,
    };

    let runs_manifests: BTreeSet<String> = runs.iter().filter_map(|r| r.manifest.clone()).collect();
    let report = ReportFile {
        schema: REPORT_SCHEMA.into(),
        manifest: manifest.hash.clone(),
        runs_manifests: runs_manifests.into_iter().collect(),
        scoring,
        retrieval_bound: retrieval_bound(&runs, &notes)?,
        notes_with_errors: runs
            .iter()
            .filter(|r| r.stages.iter().any(|s| !s.errors.is_empty()))
            .map(|r| r.note_id.clone())
            .collect(),
        final_report,
        stages,
        chapter_recall,
    };
    write_json(&args.out.join(REPORT_FILE), &report)?;
    write_atomic(
        &args.out.join(PER_LABEL_FILE),
        &per_label_csv(&report.final_report)?,
    )?;
    manifest.finish();
    write_json(&args.out.join("report.manifest.json"), &manifest)?;
    println!(
        "micro F1 {:.4}  macro F1 {:.4}  EMR {:.4}  ({} notes) -> {}",
        report.final_report.micro_f1,
        report.final_report.macro_f1,
        report.final_report.emr,
        report.final_report.n_notes,
        args.out.join(REPORT_FILE).display()
    );
    Ok(ExitCode::SUCCESS)
}

fn per_label_csv(report: &EvalReport<CodeId>) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["label", "tp", "fp", "fn", "precision", "recall", "f1"])?;
    for (label, s) in &report.per_label {
        w.write_record([
            label.to_string(),
            s.tp.to_string(),
            s.fp.to_string(),
            s.fn_.to_string(),
            s.precision.to_string(),
            s.recall.to_string(),
            s.f1.to_string(),
        ])?;
    }
    Ok(w.into_inner()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmsFile {
    pub schema: String,
    pub manifest: String,
    #[serde(flatten)]
    pub report: ExperimentReport,
}

pub fn curves_csv(report: &ExperimentReport) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["arm", "K", "micro_f1", "macro_f1", "n_notes"])?;
    for p in &report.points {
        w.write_record([
            p.series(),
            p.k.to_string(),
            p.micro_f1.to_string(),
            p.macro_f1.to_string(),
            p.n_notes.to_string(),
        ])?;
    }
    Ok(w.into_inner()?)
}

fn cmd_experiment(
    config: &EngineConfig,
    env: &dyn Env,
    name: &str,
    args: &ExperimentArgs,
) -> anyhow::Result<ExitCode> {
    let mut manifest = RunManifest::begin(&format!("experiment {name}"), config);
    let engine = load_engine(config, env, Some(&mut manifest))?;
    let notes_file = notes_path(config);
    let notes = load_notes(&notes_file)?;
    manifest.add_input("notes", &notes_file)?;
    let space = CodeSpace::from_taxonomy(
        &engine.taxonomy,
        engine.embedder.as_ref(),
        config.retrieval.to_core().hnsw,
    )?;
    let executor = RayonExecutor::new(config.pipeline.workers)?;
    let ks = &config.experiment.k_values;

    let report = with_backend(
        config,
        env,
        &notes,
        args.backend.record.as_deref(),
        |backend| {
            let pipeline = Pipeline {
                taxonomy: &engine.taxonomy,
                index: &engine.index,
                embedder: engine.embedder.as_ref(),
                templates: &engine.templates,
                backend: &backend,
                executor: &executor,
                clock: &NoClock,
                config: config.pipeline_config(),
            };
            Ok(match name {
                "candidate-scaling" => experiments::candidate_scaling_run(
                    &pipeline,
                    &space,
                    &notes,
                    ks,
                    Arm {
                        context: config.experiment.context,
                        decoding: config.backend.decoding,
                    },
                )?,
                "context-ablation" => experiments::context_ablation_run(
                    &pipeline,
                    &space,
                    &notes,
                    ks,
                    &config.experiment.context_levels,
                )?,
                _ => experiments::decoding_mode_run(
                    &pipeline.with_config(clh_core::pipeline::PipelineConfig {
                        context: config.experiment.context,
                        ..config.pipeline_config()
                    }),
                    &space,
                    &notes,
                    ks,
                )?,
            })
        },
    )?;

    for f in &report.failures {
        warn!("note {} ({} K={}): {}", f.note_id, f.arm, f.k, f.message);
    }
    write_atomic(&args.out.join(CURVES_FILE), &curves_csv(&report)?)?;
    let arms = ArmsFile {
        schema: ARMS_SCHEMA.into(),
        manifest: manifest.hash.clone(),
        report,
    };
    write_json(&args.out.join(ARMS_FILE), &arms)?;
    manifest.finish();
    write_json(&args.out.join("curves.manifest.json"), &manifest)?;
    println!(
        "{name}: {} points over {} arms -> {}",
        arms.report.points.len(),
        arms.report.arms.len(),
        args.out.join(CURVES_FILE).display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_report(dir: &Path) -> anyhow::Result<ExitCode> {
    let mut found = false;
    let report_path = dir.join(REPORT_FILE);
    if report_path.exists() {
        found = true;
        let r: ReportFile = read_json(&report_path)?;
        let f = &r.final_report;
        println!(
            "{} ({} notes, manifest {})",
            report_path.display(),
            f.n_notes,
            &r.manifest[..12.min(r.manifest.len())]
        );
        println!(
            "  final   micro F1 {:.4}  macro F1 {:.4}  EMR {:.4}  P {:.4}  R {:.4}",
            f.micro_f1, f.macro_f1, f.emr, f.precision, f.recall
        );
        println!(
            "  retrieval bound recall {:.4} ({}/{})",
            r.retrieval_bound.recall, r.retrieval_bound.retrieved, r.retrieval_bound.gold
        );
        for s in &r.stages {
            println!(
                "  stage {} {:<8} recall {:.4}  precision {:.4}",
                s.stage.number(),
                s.stage,
                s.report.recall,
                s.report.precision
            );
        }
        if let Some(t) = &r.chapter_recall {
            println!("  chapter recall@{} (snippets / evidence)", t.k);
            for c in &t.chapters {
                println!(
                    "    {:<8} n={:<4} {:.3} / {:.3}",
                    c.chapter, c.n_gold, c.agent_recall, c.evidence_recall
                );
            }
        }
        if !r.notes_with_errors.is_empty() {
            println!("  {} notes with stage errors", r.notes_with_errors.len());
        }
    }
    let arms_path = dir.join(ARMS_FILE);
    if arms_path.exists() {
        found = true;
        let a: ArmsFile = read_json(&arms_path)?;
        println!("{} ({})", arms_path.display(), a.report.experiment);
        for p in &a.report.points {
            println!(
                "  {:<40} K={:<3} micro {:.4}  macro {:.4}  n={}{}",
                p.series(),
                p.k,
                p.micro_f1,
                p.macro_f1,
                p.n_notes,
                if p.unparseable > 0 {
                    format!("  unparseable={}", p.unparseable)
                } else {
                    String::new()
                }
            );
        }
        if !a.report.failures.is_empty() {
            println!("  {} failed cells", a.report.failures.len());
        }
    }
    if !found {
        bail!("{}: no {REPORT_FILE} or {ARMS_FILE}", dir.display());
    }
    Ok(ExitCode::SUCCESS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clh_core::pipeline::Stage;

    #[test]
    fn stage_names_in_csv() {
        let report = ExperimentReport {
            experiment: "x".into(),
            ks: vec![0],
            arms: vec![],
            points: vec![clh_core::experiments::CurvePoint {
                arm: "ids_only/thinking".into(),
                stage: Stage::Assign,
                k: 0,
                micro_f1: 1.0,
                macro_f1: 0.5,
                n_notes: 3,
                errors: 0,
                unparseable: 0,
                shortfalls: 0,
            }],
            failures: vec![],
        };
        let text = String::from_utf8(curves_csv(&report).unwrap()).unwrap();
        assert_eq!(
            text,
            "arm,K,micro_f1,macro_f1,n_notes\nids_only/thinking/assign,0,1,0.5,3\n"
        );
    }
}
