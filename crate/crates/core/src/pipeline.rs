//! File-based pipeline stages. Each stage reads its inputs from the run
//! configuration and the output directory, writes its artifacts
//! atomically, and records a manifest naming the hashes of everything it
//! read and wrote.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::baseline::{self, ComparisonRow, EvalFilters, LinearCoder};
use crate::config::{ConfigError, RunConfig};
use crate::dataset::{self, Document, Split, SplitCorpus, DEFAULT_WORD_BUCKET};
use crate::gateway::{self, ChatTransport, Gateway, GatewayError, Mode, RunReport};
use crate::icd::{DescriptionIndex, Hierarchy};
use crate::metrics::{self, CodingReport, MapReport, PredictionSet};
use crate::postprocess::{self, ParseRoute};
use crate::prompt::{build_coding_prompt, GenerationTemplate};
use crate::review::{agreement_report, AgreementReport, ReviewError, ReviewPool, ReviewStore, SessionDefaults};
use crate::selection::{self, SelectionManifest};
use crate::silver::{self, GenerationPlan};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Endpoint(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

impl PipelineError {
    /// 2 configuration, 3 data, 4 endpoint.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Usage(_) => 2,
            PipelineError::Data(_) | PipelineError::Io { .. } => 3,
            PipelineError::Endpoint(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Config(_) | PipelineError::Usage(_) => "config",
            PipelineError::Data(_) | PipelineError::Io { .. } => "data",
            PipelineError::Endpoint(_) => "endpoint",
        }
    }

    pub fn io_at(path: &Path, e: impl std::fmt::Display) -> Self {
        PipelineError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {
        $(impl From<$t> for PipelineError {
            fn from(e: $t) -> Self {
                PipelineError::Data(e.to_string())
            }
        })*
    };
}

data_error!(
    dataset::DatasetError,
    selection::SelectionError,
    silver::PlanError,
    metrics::MetricsError,
    baseline::BaselineError,
    crate::icd::IcdError,
    crate::prompt::PromptError,
    csv::Error,
    serde_json::Error
);

impl From<GatewayError> for PipelineError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::ClearanceRequired | GatewayError::Config(_) | GatewayError::MissingToken(_) => {
                PipelineError::Usage(e.to_string())
            }
            GatewayError::Prompt(p) => PipelineError::Data(p.to_string()),
            other => PipelineError::Endpoint(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Artifact names inside the output directory.
pub mod artifacts {
    pub const SELECTION: &str = "selection.json";
    pub const PLAN: &str = "plan.jsonl";
    pub const GENERATIONS: &str = "generations.jsonl";
    pub const GENERATION_REPORT: &str = "generation_report.json";
    pub const SYNTHETIC: &str = "synthetic.jsonl";
    pub const POSTPROCESS_REPORT: &str = "postprocess_report.json";
    pub const AUGMENTED: &str = "augmented.jsonl";
    pub const COMPARISON_JSON: &str = "comparison.json";
    pub const COMPARISON_CSV: &str = "comparison.csv";
    pub const CODING_PREDICTIONS: &str = "coding_predictions.jsonl";
    pub const CODING_REPORT: &str = "coding_report.json";
    pub const CODING_CSV: &str = "coding_report.csv";
    pub const MANIFESTS: &str = "manifests";
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| PipelineError::io_at(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Writes via a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| PipelineError::io_at(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| PipelineError::io_at(dir, e))?;
    tmp.write_all(bytes).map_err(|e| PipelineError::io_at(path, e))?;
    tmp.persist(path).map_err(|e| PipelineError::io_at(path, e.error))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = fs::File::open(path).map_err(|e| PipelineError::io_at(path, e))?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

fn open(path: &Path) -> Result<BufReader<fs::File>> {
    Ok(BufReader::new(fs::File::open(path).map_err(|e| PipelineError::io_at(path, e))?))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRef {
    /// Relative to the output directory when inside it.
    pub path: String,
    pub sha256: String,
}

/// Audit record of one stage run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub toolkit_version: String,
    pub config_hash: String,
    pub inputs: BTreeMap<String, ArtifactRef>,
    pub outputs: BTreeMap<String, ArtifactRef>,
    pub summary: Value,
}

struct Stage<'a> {
    cfg: &'a RunConfig,
    manifest: StageManifest,
}

impl<'a> Stage<'a> {
    fn new(cfg: &'a RunConfig, name: &str) -> Self {
        Stage {
            cfg,
            manifest: StageManifest {
                stage: name.to_string(),
                toolkit_version: crate::VERSION.to_string(),
                config_hash: cfg.hash(),
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                summary: Value::Null,
            },
        }
    }

    fn display(&self, path: &Path) -> String {
        path.strip_prefix(&self.cfg.out_dir)
            .map(|p| p.display().to_string())
            .unwrap_or_else(|_| path.display().to_string())
    }

    fn input(&mut self, name: &str, path: &Path) -> Result<()> {
        let r = ArtifactRef {
            path: self.display(path),
            sha256: sha256_file(path)?,
        };
        self.manifest.inputs.insert(name.to_string(), r);
        Ok(())
    }

    fn output(&mut self, name: &str, path: &Path) -> Result<()> {
        let r = ArtifactRef {
            path: self.display(path),
            sha256: sha256_file(path)?,
        };
        self.manifest.outputs.insert(name.to_string(), r);
        Ok(())
    }

    fn finish(mut self, summary: Value) -> Result<StageManifest> {
        self.manifest.summary = summary;
        let path = self
            .cfg
            .out_path(artifacts::MANIFESTS)
            .join(format!("{}.json", self.manifest.stage));
        write_json(&path, &self.manifest)?;
        Ok(self.manifest)
    }
}

fn corpus_path(cfg: &RunConfig) -> PathBuf {
    PathBuf::from(&cfg.corpus)
}

fn load_corpus(path: &Path) -> Result<SplitCorpus> {
    SplitCorpus::load(path).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))
}

fn write_corpus(path: &Path, corpus: &SplitCorpus) -> Result<()> {
    let mut buf = Vec::new();
    corpus.write_jsonl(&mut buf).map_err(|e| PipelineError::io_at(path, e))?;
    write_atomic(path, &buf)
}

/// Candidate codes, eligible families, the seeded family sample and the
/// generation codes.
pub fn select(cfg: &RunConfig) -> Result<StageManifest> {
    let mut stage = Stage::new(cfg, "select");
    let corpus_file = corpus_path(cfg);
    stage.input("corpus", &corpus_file)?;
    let corpus = load_corpus(&corpus_file)?;
    let index = dataset::population_index(&corpus);
    let manifest = selection::select(&index, &cfg.selection(), cfg.allow_fewer_families)?;
    let out = cfg.out_path(artifacts::SELECTION);
    write_json(&out, &manifest)?;
    stage.output("selection", &out)?;
    stage.finish(serde_json::json!({
        "candidates": manifest.candidates.len(),
        "eligible_families": manifest.eligible_families.len(),
        "chosen_families": manifest.chosen_families,
        "few_shot_codes": manifest.generation_codes.few_shot_codes.len(),
        "zero_shot_codes": manifest.generation_codes.zero_shot_codes.len(),
    }))
}

pub fn read_selection(cfg: &RunConfig) -> Result<SelectionManifest> {
    read_json(&cfg.out_path(artifacts::SELECTION))
}

/// Silver-standard records for every generation code.
pub fn plan(cfg: &RunConfig) -> Result<StageManifest> {
    let mut stage = Stage::new(cfg, "plan");
    let corpus_file = corpus_path(cfg);
    let sel_file = cfg.out_path(artifacts::SELECTION);
    stage.input("corpus", &corpus_file)?;
    stage.input("selection", &sel_file)?;
    let corpus = load_corpus(&corpus_file)?;
    let sel = read_selection(cfg)?;
    let plan = silver::build_plan(&sel.generation_codes, &corpus, &cfg.plan());
    let mut buf = Vec::new();
    plan.write_jsonl(&mut buf).map_err(|e| PipelineError::io_at(&sel_file, e))?;
    let out = cfg.out_path(artifacts::PLAN);
    write_atomic(&out, &buf)?;
    stage.output("plan", &out)?;
    stage.finish(serde_json::json!({
        "records": plan.records.len(),
        "unique": plan.unique_count(),
        "duplicates": plan.duplicate_count(),
        "warnings": plan.warnings,
    }))
}

pub fn read_plan(cfg: &RunConfig) -> Result<GenerationPlan> {
    Ok(GenerationPlan::read_jsonl(open(&cfg.out_path(artifacts::PLAN))?)?)
}

fn gateway_for(
    cfg: &RunConfig,
    mode: Mode,
    clearance: bool,
    transport: Option<Box<dyn ChatTransport>>,
) -> Result<Gateway> {
    let fixtures = (mode != Mode::Live).then(|| PathBuf::from(&cfg.fixtures));
    Ok(match transport {
        Some(t) => Gateway::with_transport(cfg.endpoint(), mode, fixtures, clearance, Some(t))?,
        None => Gateway::new(cfg.endpoint(), mode, fixtures, clearance)?,
    })
}

fn load_descriptions(cfg: &RunConfig) -> Result<DescriptionIndex> {
    let path = Path::new(&cfg.descriptions);
    DescriptionIndex::from_path(path).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))
}

/// Sends every plan record through the gateway. `transport` replaces the
/// HTTP client (e.g. with the simulated writer); replay mode ignores it.
pub fn generate(
    cfg: &RunConfig,
    clearance: bool,
    transport: Option<Box<dyn ChatTransport>>,
) -> Result<(StageManifest, RunReport)> {
    let mode = cfg.mode();
    let transport = if mode == Mode::Replay { None } else { transport };
    let gw = gateway_for(cfg, mode, clearance, transport)?;
    let mut stage = Stage::new(cfg, "generate");
    let plan_file = cfg.out_path(artifacts::PLAN);
    stage.input("plan", &plan_file)?;
    stage.input("descriptions", Path::new(&cfg.descriptions))?;
    let plan = read_plan(cfg)?;
    let index = load_descriptions(cfg)?;
    let template = GenerationTemplate::by_version(&cfg.template_version, cfg.template_dir.as_deref().map(Path::new))?;
    let report = gateway::run_plan(&plan, &index, &template, &gw);
    let mut buf = Vec::new();
    report.write_jsonl(&mut buf).map_err(|e| PipelineError::io_at(&plan_file, e))?;
    let out = cfg.out_path(artifacts::GENERATIONS);
    write_atomic(&out, &buf)?;
    let rep = cfg.out_path(artifacts::GENERATION_REPORT);
    write_json(&rep, &serde_json::json!({"failures": report.failures}))?;
    stage.output("generations", &out)?;
    stage.output("report", &rep)?;
    let manifest = stage.finish(serde_json::json!({
        "mode": mode,
        "template_version": template.version(),
        "responses": report.responses.len(),
        "failures": report.failures.len(),
    }))?;
    Ok((manifest, report))
}

/// Extracts codes, scrubs code mentions and writes the synthetic corpus.
pub fn postprocess(cfg: &RunConfig) -> Result<StageManifest> {
    let mut stage = Stage::new(cfg, "postprocess");
    let plan_file = cfg.out_path(artifacts::PLAN);
    let gen_file = cfg.out_path(artifacts::GENERATIONS);
    stage.input("plan", &plan_file)?;
    stage.input("generations", &gen_file)?;
    let plan = read_plan(cfg)?;
    let generations = RunReport::read_jsonl(open(&gen_file)?)?;
    let (docs, report) = postprocess::synthetic_documents(
        generations.iter().map(|g| (g.plan_id.as_str(), g.text.as_str())),
        &plan.records,
        cfg.label_source()?,
        cfg.max_tokens,
    );
    let corpus = SplitCorpus {
        train: docs,
        ..Default::default()
    };
    let out = cfg.out_path(artifacts::SYNTHETIC);
    write_corpus(&out, &corpus)?;
    let rep = cfg.out_path(artifacts::POSTPROCESS_REPORT);
    write_json(&rep, &report)?;
    stage.output("synthetic", &out)?;
    stage.output("report", &rep)?;
    stage.finish(serde_json::json!({
        "documents": report.documents,
        "zero_code_documents": report.zero_code_documents.len(),
        "scrub_residuals": report.scrub_residuals,
        "mean_coverage": report.mean_coverage,
    }))
}

fn read_synthetic(cfg: &RunConfig) -> Result<Vec<Document>> {
    Ok(load_corpus(&cfg.out_path(artifacts::SYNTHETIC))?.train)
}

/// Baseline corpus plus synthetic training documents.
pub fn merge(cfg: &RunConfig) -> Result<StageManifest> {
    let mut stage = Stage::new(cfg, "merge");
    let corpus_file = corpus_path(cfg);
    let syn_file = cfg.out_path(artifacts::SYNTHETIC);
    stage.input("corpus", &corpus_file)?;
    stage.input("synthetic", &syn_file)?;
    let corpus = load_corpus(&corpus_file)?;
    let synthetic = read_synthetic(cfg)?;
    let merged = dataset::merge_augmented(&corpus, &synthetic)?;
    let out = cfg.out_path(artifacts::AUGMENTED);
    write_corpus(&out, &merged)?;
    stage.output("augmented", &out)?;
    stage.finish(serde_json::json!({
        "baseline_train": corpus.train.len(),
        "synthetic": synthetic.len(),
        "merged_train": merged.train.len(),
    }))
}

/// Which corpus a model is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Base,
    Aug,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Aug => "aug",
        }
    }

    fn corpus_path(&self, cfg: &RunConfig) -> PathBuf {
        match self {
            Variant::Base => corpus_path(cfg),
            Variant::Aug => cfg.out_path(artifacts::AUGMENTED),
        }
    }

    pub fn model_path(&self, cfg: &RunConfig) -> PathBuf {
        cfg.out_path(&format!("model_{}.json", self.as_str()))
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "base" => Ok(Variant::Base),
            "aug" => Ok(Variant::Aug),
            other => Err(format!("unknown variant {other:?} (base|aug)")),
        }
    }
}

pub fn train(cfg: &RunConfig, variant: Variant) -> Result<StageManifest> {
    let mut stage = Stage::new(cfg, &format!("train_{}", variant.as_str()));
    let input = variant.corpus_path(cfg);
    stage.input("corpus", &input)?;
    let corpus = load_corpus(&input)?;
    let mut model = baseline::train(&corpus, &cfg.train())?;
    if cfg.sweep_threshold {
        baseline::sweep_threshold(&mut model, &corpus.dev)?;
    }
    let out = variant.model_path(cfg);
    let mut buf = Vec::new();
    model.write_json(&mut buf)?;
    write_atomic(&out, &buf)?;
    stage.output("model", &out)?;
    stage.finish(serde_json::json!({
        "labels": model.labels.len(),
        "vocabulary": model.features.len(),
        "selected_epoch": model.selected_epoch,
        "threshold": model.threshold,
        "history": model.history,
    }))
}

pub fn predictions_path(cfg: &RunConfig, variant: Variant, split: Split) -> PathBuf {
    cfg.out_path(&format!("predictions_{}_{split}.jsonl", variant.as_str()))
}

pub fn predict(cfg: &RunConfig, variant: Variant, split: Split) -> Result<StageManifest> {
    let mut stage = Stage::new(cfg, &format!("predict_{}_{split}", variant.as_str()));
    let model_file = variant.model_path(cfg);
    let corpus_file = corpus_path(cfg);
    stage.input("model", &model_file)?;
    stage.input("corpus", &corpus_file)?;
    let model = LinearCoder::read_json(open(&model_file)?)?;
    let corpus = load_corpus(&corpus_file)?;
    let pred = baseline::predict(&model, corpus.split(split));
    let out = predictions_path(cfg, variant, split);
    let mut buf = Vec::new();
    pred.write_jsonl(&mut buf).map_err(|e| PipelineError::io_at(&out, e))?;
    write_atomic(&out, &buf)?;
    stage.output("predictions", &out)?;
    stage.finish(serde_json::json!({"documents": pred.len()}))
}

/// Leaf scores on the overall/family/generation codesets, weak
/// hierarchical error rates, set-based and count-preserving scores, and
/// MAP when scores are present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub split: Split,
    pub documents: usize,
    pub row: ComparisonRow,
    pub coding: CodingReport,
    pub map: Option<MapReport>,
}

fn filters_from(sel: &SelectionManifest) -> EvalFilters {
    EvalFilters {
        families: sel.chosen_families.iter().cloned().collect(),
        generation: sel.generation_codes.all(),
    }
}

/// Scores a prediction file against the gold labels of one split.
pub fn evaluate_file(
    cfg: &RunConfig,
    predictions: &Path,
    split: Split,
    output_stem: &str,
) -> Result<(StageManifest, EvaluationReport)> {
    let mut stage = Stage::new(cfg, &format!("evaluate_{output_stem}"));
    let corpus_file = corpus_path(cfg);
    let sel_file = cfg.out_path(artifacts::SELECTION);
    stage.input("predictions", predictions)?;
    stage.input("corpus", &corpus_file)?;
    stage.input("selection", &sel_file)?;
    let pred = PredictionSet::read_jsonl(open(predictions)?)?;
    let corpus = load_corpus(&corpus_file)?;
    let gold = PredictionSet::from_documents(corpus.split(split));
    let filters = filters_from(&read_selection(cfg)?);
    let report = evaluation_report(&pred, &gold, &filters, split, output_stem)?;
    let json = cfg.out_path(&format!("{output_stem}.json"));
    let csv_path = cfg.out_path(&format!("{output_stem}.csv"));
    write_json(&json, &report)?;
    write_atomic(&csv_path, &evaluation_csv(&report)?)?;
    stage.output("report", &json)?;
    stage.output("csv", &csv_path)?;
    let manifest = stage.finish(serde_json::json!({"documents": report.documents}))?;
    Ok((manifest, report))
}

pub fn evaluation_report(
    pred: &PredictionSet,
    gold: &PredictionSet,
    filters: &EvalFilters,
    split: Split,
    name: &str,
) -> Result<EvaluationReport> {
    use metrics::{Averaging, CodesetFilter};
    let f = CodesetFilter::Families(filters.families.clone());
    let g = CodesetFilter::Generation(filters.generation.clone());
    let score = |avg, filter: &CodesetFilter| match metrics::prf(pred, gold, avg, filter) {
        Ok(p) => Ok(Some(p.f1)),
        Err(metrics::MetricsError::EmptyEvaluationSet) => Ok(None),
        Err(e) => Err(e),
    };
    let whcm_f = metrics::whcm(pred, gold, &f)?;
    let whcm_g = metrics::whcm(pred, gold, &g)?;
    let has_scores = !pred.is_empty() && pred.docs.values().all(|d| d.scores.is_some());
    Ok(EvaluationReport {
        split,
        documents: gold.len(),
        row: ComparisonRow {
            model: name.to_string(),
            variant: split.to_string(),
            train_documents: 0,
            selected_epoch: 0,
            dev_map: 0.0,
            mi_f1: score(Averaging::Micro, &CodesetFilter::Overall)?,
            ma_f1: score(Averaging::Macro, &CodesetFilter::Overall)?,
            mi_f1_f: score(Averaging::Micro, &f)?,
            ma_f1_f: score(Averaging::Macro, &f)?,
            mi_f1_f_gen: score(Averaging::Micro, &g)?,
            ma_f1_f_gen: score(Averaging::Macro, &g)?,
            oof_f: whcm_f.oof,
            if_f: whcm_f.in_family,
            oof_f_gen: whcm_g.oof,
            if_f_gen: whcm_g.in_family,
        },
        coding: metrics::coding_report(pred, gold, &Hierarchy::family_only())?,
        map: if has_scores {
            Some(metrics::mean_average_precision(pred, gold)?)
        } else {
            None
        },
    })
}

fn evaluation_csv(report: &EvaluationReport) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    baseline::ComparisonReport {
        config: baseline::TrainConfig::default(),
        filters: EvalFilters {
            families: Default::default(),
            generation: Default::default(),
        },
        rows: vec![report.row.clone()],
    }
    .write_csv(&mut buf)?;
    buf.push(b'\n');
    report.coding.write_csv(&report.row.model, &mut buf)?;
    Ok(buf)
}

/// Trains base and aug with the same settings and scores both on test.
pub fn compare(cfg: &RunConfig) -> Result<(StageManifest, baseline::ComparisonReport)> {
    let mut stage = Stage::new(cfg, "compare");
    let base_file = corpus_path(cfg);
    let aug_file = cfg.out_path(artifacts::AUGMENTED);
    let sel_file = cfg.out_path(artifacts::SELECTION);
    stage.input("corpus", &base_file)?;
    stage.input("augmented", &aug_file)?;
    stage.input("selection", &sel_file)?;
    let base = load_corpus(&base_file)?;
    let aug = load_corpus(&aug_file)?;
    let filters = filters_from(&read_selection(cfg)?);
    let report = baseline::compare_runs(&base, &aug, &filters, &cfg.train())?;
    let json = cfg.out_path(artifacts::COMPARISON_JSON);
    let csv_path = cfg.out_path(artifacts::COMPARISON_CSV);
    write_json(&json, &report)?;
    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    write_atomic(&csv_path, &buf)?;
    stage.output("report", &json)?;
    stage.output("csv", &csv_path)?;
    let manifest = stage.finish(serde_json::to_value(&report.rows)?)?;
    Ok((manifest, report))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CodingRunReport {
    pub documents: usize,
    pub routes: BTreeMap<String, usize>,
    pub malformed_codes: usize,
    pub failures: Vec<gateway::RecordFailure>,
    pub scores: Option<CodingReport>,
}

/// Asks the model to code the notes of one split, then scores the result
/// with leaf, set-based and count-preserving metrics.
pub fn code_notes(
    cfg: &RunConfig,
    split: Split,
    clearance: bool,
    transport: Option<Box<dyn ChatTransport>>,
) -> Result<(StageManifest, CodingRunReport)> {
    let mode = cfg.mode();
    let transport = if mode == Mode::Replay { None } else { transport };
    let gw = gateway_for(cfg, mode, clearance, transport)?;
    let mut stage = Stage::new(cfg, &format!("code_notes_{split}"));
    let corpus_file = corpus_path(cfg);
    stage.input("corpus", &corpus_file)?;
    let corpus = load_corpus(&corpus_file)?;
    let docs = corpus.split(split);
    let mut report = CodingRunReport::default();
    let mut pred = PredictionSet::new();
    for doc in docs {
        let outcome = build_coding_prompt(&doc.text)
            .map_err(GatewayError::from)
            .and_then(|spec| gw.complete(&spec));
        match outcome {
            Ok(text) => match postprocess::parse_coding_response(&doc.id, &text) {
                Ok(p) => {
                    let route = match p.route {
                        ParseRoute::Json => "json",
                        ParseRoute::RegexFallback => "regex_fallback",
                    };
                    *report.routes.entry(route.to_string()).or_insert(0) += 1;
                    report.malformed_codes += p.malformed_codes;
                    pred.insert(doc.id.clone(), p.codes());
                }
                Err(e) => report.failures.push(gateway::RecordFailure {
                    plan_id: doc.id.clone(),
                    error: e.to_string(),
                }),
            },
            Err(e) => report.failures.push(gateway::RecordFailure {
                plan_id: doc.id.clone(),
                error: e.to_string(),
            }),
        }
    }
    report.documents = docs.len();
    let gold = PredictionSet::from_documents(docs);
    report.scores = Some(metrics::coding_report(&pred, &gold, &Hierarchy::family_only())?);
    let pred_out = cfg.out_path(artifacts::CODING_PREDICTIONS);
    let mut buf = Vec::new();
    pred.write_jsonl(&mut buf).map_err(|e| PipelineError::io_at(&pred_out, e))?;
    write_atomic(&pred_out, &buf)?;
    let rep = cfg.out_path(artifacts::CODING_REPORT);
    write_json(&rep, &report)?;
    let csv_path = cfg.out_path(artifacts::CODING_CSV);
    let mut buf = Vec::new();
    if let Some(s) = &report.scores {
        s.write_csv(&split.to_string(), &mut buf)?;
    }
    write_atomic(&csv_path, &buf)?;
    stage.output("predictions", &pred_out)?;
    stage.output("report", &rep)?;
    stage.output("csv", &csv_path)?;
    let manifest = stage.finish(serde_json::json!({
        "mode": mode,
        "documents": report.documents,
        "failures": report.failures.len(),
    }))?;
    Ok((manifest, report))
}

/// Word/label distribution CSVs for the real corpus and, when present,
/// the synthetic one; plus the per-split label summary.
pub fn stats(cfg: &RunConfig) -> Result<StageManifest> {
    let mut stage = Stage::new(cfg, "stats");
    let corpus_file = corpus_path(cfg);
    stage.input("corpus", &corpus_file)?;
    let corpus = load_corpus(&corpus_file)?;
    let real: Vec<Document> = corpus.documents().map(|(_, d)| d.clone()).collect();
    let mut sets = vec![("real", real)];
    let syn_file = cfg.out_path(artifacts::SYNTHETIC);
    if syn_file.exists() {
        stage.input("synthetic", &syn_file)?;
        let syn = read_synthetic(cfg)?;
        if !syn.is_empty() {
            sets.push(("synthetic", syn));
        }
    }
    for (name, docs) in &sets {
        let s = dataset::corpus_stats(docs, DEFAULT_WORD_BUCKET)?;
        let mut buf = Vec::new();
        s.write_csv(name, &mut buf)?;
        let out = cfg.out_path(&format!("stats_{name}.csv"));
        write_atomic(&out, &buf)?;
        stage.output(&format!("stats_{name}"), &out)?;
    }
    let index = dataset::population_index(&corpus);
    let summary = dataset::split_summary(&corpus, &index, cfg.thresholds());
    let out = cfg.out_path("split_summary.json");
    write_json(&out, &summary)?;
    stage.output("split_summary", &out)?;
    stage.finish(serde_json::json!({"corpora": sets.iter().map(|s| s.0).collect::<Vec<_>>()}))
}

/// `select → plan → generate → postprocess → merge → train (base, aug) →
/// predict → evaluate → compare`.
pub fn run_all(cfg: &RunConfig, clearance: bool, transport: Option<Box<dyn ChatTransport>>) -> Result<Vec<StageManifest>> {
    let mut done = vec![select(cfg)?, plan(cfg)?];
    let (m, report) = generate(cfg, clearance, transport)?;
    done.push(m);
    if !report.failures.is_empty() {
        return Err(PipelineError::Endpoint(format!(
            "{} generation request(s) failed, first: {}",
            report.failures.len(),
            report.failures[0].error
        )));
    }
    done.push(postprocess(cfg)?);
    done.push(merge(cfg)?);
    for v in [Variant::Base, Variant::Aug] {
        done.push(train(cfg, v)?);
        done.push(predict(cfg, v, Split::Test)?);
        let pred = predictions_path(cfg, v, Split::Test);
        done.push(evaluate_file(cfg, &pred, Split::Test, &format!("evaluation_{}", v.as_str()))?.0);
    }
    done.push(compare(cfg)?.0);
    Ok(done)
}

pub fn review_log_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_path("review").join("events.jsonl")
}

/// The shared review pool: a seeded draw of real test notes and synthetic
/// notes, identical for every evaluator.
pub fn review_pool(cfg: &RunConfig) -> Result<ReviewPool> {
    let corpus = load_corpus(&corpus_path(cfg))?;
    let synthetic = read_synthetic(cfg)?;
    ReviewPool::sample(
        &corpus.test,
        &synthetic,
        cfg.review_n_real,
        cfg.review_n_synthetic,
        cfg.session_seed,
    )
    .map_err(|e| PipelineError::Data(e.to_string()))
}

pub fn review_store(cfg: &RunConfig) -> Result<ReviewStore> {
    let log = review_log_path(cfg);
    ReviewStore::open(review_pool(cfg)?, &log).map_err(|e| PipelineError::Data(format!("{}: {e}", log.display())))
}

pub fn session_defaults(cfg: &RunConfig) -> SessionDefaults {
    SessionDefaults {
        n_real: cfg.review_n_real,
        n_synthetic: cfg.review_n_synthetic,
        seed: cfg.session_seed,
    }
}

/// Exports the rating sheet from the review log and writes the agreement
/// report next to it.
pub fn report_agreement(cfg: &RunConfig, partial: bool) -> Result<(StageManifest, AgreementReport)> {
    let mut stage = Stage::new(cfg, "report_agreement");
    let log = review_log_path(cfg);
    if !log.exists() {
        return Err(PipelineError::Data(format!("{}: no review log", log.display())));
    }
    stage.input("review_log", &log)?;
    let store = review_store(cfg)?;
    let data = |e: ReviewError| PipelineError::Data(e.to_string());
    let sheet = store.export_sheet(&[], partial).map_err(data)?;
    let report = agreement_report(&sheet).map_err(data)?;
    let sheet_path = cfg.out_path("rating_sheet.csv");
    let mut buf = Vec::new();
    sheet.write_csv(&mut buf)?;
    write_atomic(&sheet_path, &buf)?;
    let json = cfg.out_path("agreement.json");
    write_json(&json, &report)?;
    let csv_path = cfg.out_path("agreement.csv");
    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    write_atomic(&csv_path, &buf)?;
    stage.output("rating_sheet", &sheet_path)?;
    stage.output("report", &json)?;
    stage.output("csv", &csv_path)?;
    let manifest = stage.finish(serde_json::json!({
        "evaluators": report.evaluators,
        "documents": report.documents,
        "cells": sheet.cells.len(),
        "partial": partial,
    }))?;
    Ok((manifest, report))
}
