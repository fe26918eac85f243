//! Subcommand implementations. Each writes its artifacts under the run's
//! output directory, every file beginning with the run header line.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use medcorr_core::artifact::{read_predictions, write_jsonl, write_predictions, Prediction, RunHeader};
use medcorr_core::context::{PipelineContext, QueryEmbeddings, TrainingPool};
use medcorr_core::corpus::{load_dataset, validate, write_dataset, ClinicalNote, Dataset, DatasetName, Format};
use medcorr_core::cot::{CascadeConfig, CotPipeline, ExampleSelection};
use medcorr_core::ensemble::{merge, merged_predictions, PromptRegenerator};
use medcorr_core::eval::{build_report, write_report, HttpScorer, PairScorer};
use medcorr_core::llm::{Backend, LiveBackend, MockBackend, MockScript, RecordingBackend, ReplayBackend};
use medcorr_core::prompt::{TemplateName, TemplateSet, Verdict};
use medcorr_core::reason::{build_reason_bank, ReasonBank, ReasonPipeline};
use medcorr_core::retrieval::{
    embed_batch, load_index, save_index, CachedEmbedder, EmbeddingBackend, HashingEmbedder, HttpEmbedder, IndexEntry,
    RetrievalConfig, VectorIndex,
};
use serde::Serialize;

use crate::config::{BackendMode, EmbedderKind, RunConfig};

/// A required artifact is missing; `hint` names the command that creates it.
#[derive(Debug, thiserror::Error)]
#[error("missing prerequisite: {what} ({path}); {hint}")]
pub struct MissingPrerequisite {
    pub what: String,
    pub path: String,
    pub hint: String,
}

fn require(path: &Path, what: &str, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(MissingPrerequisite {
            what: what.into(),
            path: path.display().to_string(),
            hint: hint.into(),
        }
        .into())
    }
}

/// Locations of every artifact a run reads or writes.
pub struct Layout {
    pub out: PathBuf,
}

impl Layout {
    pub fn index(&self) -> PathBuf {
        self.out.join("index.jsonl")
    }
    pub fn reasons(&self) -> PathBuf {
        self.out.join("reasons.jsonl")
    }
    pub fn method_dir(&self, method: &str) -> PathBuf {
        self.out.join(method)
    }
    pub fn predictions(&self, method: &str) -> PathBuf {
        self.method_dir(method).join("predictions.csv")
    }
}

pub struct Run {
    pub cfg: RunConfig,
    pub header: RunHeader,
    pub layout: Layout,
}

impl Run {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let header = RunHeader::new(cfg.hash(), cfg.seed);
        let layout = Layout { out: cfg.out_dir() };
        fs::create_dir_all(&layout.out).with_context(|| format!("creating {}", layout.out.display()))?;
        Ok(Self { cfg, header, layout })
    }

    fn split_path(&self, p: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
        let p = p.as_ref().ok_or_else(|| anyhow!("config does not set `{key}`"))?;
        Ok(self.cfg.resolve(p))
    }

    pub fn load_train(&self) -> Result<Dataset> {
        let path = self.split_path(&self.cfg.train, "train")?;
        let d = load_split(&path, DatasetName::MsTrain)?;
        if let Some(e) = d.entries.iter().find(|e| e.annotation.is_none()) {
            bail!("training note {} has no annotation", e.note.note_id);
        }
        Ok(d)
    }

    pub fn load_eval(&self, override_path: Option<&Path>) -> Result<Dataset> {
        let path = match override_path {
            Some(p) => p.to_path_buf(),
            None => self.split_path(&self.cfg.eval, "eval")?,
        };
        let name = self.cfg.eval_name.parse().unwrap_or(DatasetName::Custom);
        load_split(&path, name)
    }

    pub fn templates(&self) -> Result<TemplateSet> {
        match &self.cfg.prompts {
            Some(dir) => Ok(TemplateSet::from_dir(&self.cfg.resolve(dir))?),
            None => Ok(TemplateSet::builtin()),
        }
    }

    pub fn backend(&self) -> Result<Box<dyn Backend>> {
        let b = &self.cfg.backend;
        let inner: Box<dyn Backend> = match b.mode {
            BackendMode::Live => Box::new(LiveBackend::from_env(&b.live)?),
            BackendMode::Mock => {
                let script = match &b.mock_script {
                    Some(p) => MockScript::load(&self.cfg.resolve(p))?,
                    None => MockScript {
                        default: Some("ERROR: no".into()),
                        ..MockScript::default()
                    },
                };
                Box::new(MockBackend::new(script))
            }
            BackendMode::Replay => {
                let p = self.split_path(&b.session, "backend.session")?;
                require(
                    &p,
                    "replay session",
                    "record one with backend.record in mock or live mode",
                )?;
                Box::new(ReplayBackend::open(&p)?)
            }
        };
        match &b.record {
            Some(p) => Ok(Box::new(RecordingBackend::open(&self.cfg.resolve(p), inner)?)),
            None => Ok(inner),
        }
    }

    pub fn embedder(&self) -> Result<CachedEmbedder<Box<dyn EmbeddingBackend>>> {
        let e = &self.cfg.embeddings;
        let inner: Box<dyn EmbeddingBackend> = match e.kind {
            EmbedderKind::Hashing => Box::new(HashingEmbedder::new(e.dim)),
            EmbedderKind::Http => Box::new(HttpEmbedder::new(
                e.base_url.as_deref().unwrap_or_default(),
                e.model.as_deref().unwrap_or("text-embedding-3-small"),
                std::env::var(medcorr_core::llm::API_KEY_ENV).ok(),
                self.cfg.backend.live.retry,
                e.requests_per_minute,
            )?),
        };
        let cache = match &e.cache {
            Some(p) => self.cfg.resolve(p),
            None => self.layout.out.join("embeddings.jsonl"),
        };
        Ok(CachedEmbedder::with_file(inner, &cache)?)
    }

    fn embed_notes<'n>(
        &self,
        embedder: &dyn EmbeddingBackend,
        notes: impl Iterator<Item = &'n ClinicalNote>,
    ) -> Result<Vec<(String, medcorr_core::retrieval::Embedding)>> {
        let notes: Vec<&ClinicalNote> = notes.collect();
        let texts: Vec<String> = notes.iter().map(|n| n.plain_text()).collect();
        let vectors = embed_batch(&texts, embedder, self.cfg.embeddings.options)?;
        Ok(notes.iter().map(|n| n.note_id.clone()).zip(vectors).collect())
    }

    pub fn load_index(&self) -> Result<VectorIndex> {
        let p = self.layout.index();
        require(&p, "retrieval index", "run `medcorr index` first")?;
        let index = load_index(&p)?;
        let expected = self.embedder()?.id();
        if index.backend_id() != expected {
            bail!(
                "index at {} was built with {} but embeddings are configured as {expected}; rebuild with `medcorr index`",
                p.display(),
                index.backend_id()
            );
        }
        Ok(index)
    }

    pub fn load_bank(&self) -> Result<ReasonBank> {
        let p = self.layout.reasons();
        require(&p, "reason bank", "run `medcorr reasons build` first")?;
        Ok(ReasonBank::load(&p)?)
    }

    fn queries(&self, eval: &Dataset) -> Result<QueryEmbeddings> {
        let embedder = self.embedder()?;
        Ok(self.embed_notes(&embedder, eval.notes())?.into_iter().collect())
    }

    fn write_dir(&self, method: &str) -> Result<PathBuf> {
        let d = self.layout.method_dir(method);
        fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
        Ok(d)
    }

    fn predictions_rows(preds: &[(String, Verdict)]) -> Vec<Prediction> {
        preds.iter().map(|(id, v)| Prediction::from_verdict(id, v)).collect()
    }

    fn scorer(&self) -> Option<HttpScorer> {
        let url = self.cfg.scorer_url.as_deref()?;
        match HttpScorer::new(url).and_then(|s| s.health().map(|h| (s, h))) {
            Ok((s, h)) if h.ready => Some(s),
            Ok(_) => {
                log::warn!("scorer at {url} is not ready; neural metrics unavailable");
                None
            }
            Err(e) => {
                log::warn!("{e}; neural metrics unavailable");
                None
            }
        }
    }

    /// Writes `<dir>/report.{csv,txt}` when every eval note is annotated.
    fn report_if_annotated(&self, eval: &Dataset, dir: &Path, preds: &[Prediction]) -> Result<()> {
        if eval.entries.iter().any(|e| e.annotation.is_none()) {
            log::info!("eval split is not fully annotated; skipping report");
            return Ok(());
        }
        let refs = Prediction::from_dataset(eval);
        let scorer = self.scorer();
        let (report, _) = build_report(
            &self.cfg.eval_name,
            preds,
            &refs,
            scorer.as_ref().map(|s| s as &dyn PairScorer),
        )?;
        write_report(dir, "report", Some(&self.header), &[report])?;
        Ok(())
    }
}

pub fn load_split(path: &Path, name: DatasetName) -> Result<Dataset> {
    let d = load_dataset(path, Format::from_path(path), name).with_context(|| format!("loading {}", path.display()))?;
    let violations = validate(&d);
    if let Some(v) = violations.first() {
        bail!(
            "{}: {} annotation problem(s), first: {} — {}",
            path.display(),
            violations.len(),
            v.note_id,
            v.reason
        );
    }
    Ok(d)
}

#[derive(Debug, Serialize)]
pub struct IngestSummary {
    pub notes: usize,
    pub annotated: usize,
    pub with_error: usize,
    pub sentences: usize,
    pub violations: Vec<String>,
}

pub fn ingest(input: &Path, name: DatasetName, output: Option<&Path>) -> Result<IngestSummary> {
    let d =
        load_dataset(input, Format::from_path(input), name).with_context(|| format!("loading {}", input.display()))?;
    let violations: Vec<String> = validate(&d)
        .into_iter()
        .map(|v| format!("{}: {}", v.note_id, v.reason))
        .collect();
    let summary = IngestSummary {
        notes: d.len(),
        annotated: d.entries.iter().filter(|e| e.annotation.is_some()).count(),
        with_error: d
            .entries
            .iter()
            .filter(|e| e.annotation.as_ref().is_some_and(|a| a.error_flag))
            .count(),
        sentences: d.entries.iter().map(|e| e.note.sentences.len()).sum(),
        violations,
    };
    if let Some(out) = output {
        if !summary.violations.is_empty() {
            bail!(
                "refusing to write {}: {} annotation problem(s)",
                out.display(),
                summary.violations.len()
            );
        }
        write_dataset(&d, out, Format::from_path(out))?;
    }
    Ok(summary)
}

#[derive(Debug, Serialize)]
pub struct IndexSummary {
    pub entries: usize,
    pub dim: usize,
    pub backend: String,
    pub embedding_calls: usize,
}

pub fn index(run: &Run) -> Result<IndexSummary> {
    let train = run.load_train()?;
    let embedder = run.embedder()?;
    let vectors = run.embed_notes(&embedder, train.notes())?;
    let entries = train
        .entries
        .iter()
        .zip(vectors)
        .map(|(e, (id, embedding))| IndexEntry {
            note_id: id,
            embedding,
            error_flag: e.annotation.as_ref().is_some_and(|a| a.error_flag),
        })
        .collect();
    let index = VectorIndex::build(embedder.id(), entries)?;
    save_index(&index, &run.layout.index())?;
    Ok(IndexSummary {
        entries: index.len(),
        dim: index.dim(),
        backend: index.backend_id().to_string(),
        embedding_calls: embedder.misses(),
    })
}

#[derive(Debug, Serialize)]
pub struct BankSummary {
    pub entries: usize,
    pub generated: usize,
    pub reused: usize,
    pub failures: Vec<String>,
}

pub fn reasons_build(run: &Run) -> Result<BankSummary> {
    let train = run.load_train()?;
    let path = run.layout.reasons();
    let existing = if path.exists() {
        Some(ReasonBank::load(&path)?)
    } else {
        None
    };
    let backend = run.backend()?;
    let built = build_reason_bank(
        &train,
        existing.as_ref(),
        &run.templates()?,
        backend.as_ref(),
        &run.cfg.backend.generation,
        run.cfg.jobs,
    )?;
    built.bank.save(&path, Some(&run.header))?;
    let summary = BankSummary {
        entries: built.bank.len(),
        generated: built.generated,
        reused: built.reused,
        failures: built.failures.iter().map(|(id, e)| format!("{id}: {e}")).collect(),
    };
    if !built.is_complete() {
        bail!(
            "reason bank incomplete: {} note(s) failed (first: {}); rerun to retry only those",
            summary.failures.len(),
            summary.failures[0]
        );
    }
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Method {
    Cot,
    Reason,
    Ensemble,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Cot => "cot",
            Method::Reason => "reason",
            Method::Ensemble => "ensemble",
        }
    }
}

#[derive(Debug, Serialize)]
pub struct RunSummary {
    pub method: &'static str,
    pub notes: usize,
    pub flagged: usize,
    pub failed: usize,
    pub predictions: String,
}

/// Shared state for one `run` invocation.
struct Loaded {
    eval: Dataset,
    index: VectorIndex,
    pool: TrainingPool,
    templates: TemplateSet,
    backend: Box<dyn Backend>,
    queries: QueryEmbeddings,
}

impl Loaded {
    fn ctx<'a>(&'a self, run: &'a Run) -> PipelineContext<'a> {
        PipelineContext {
            index: &self.index,
            train: &self.pool,
            templates: &self.templates,
            backend: self.backend.as_ref(),
            generation: &run.cfg.backend.generation,
        }
    }
}

fn load_for_run(run: &Run, eval_override: Option<&Path>) -> Result<Loaded> {
    let index = run.load_index()?;
    let train = run.load_train()?;
    let eval = run.load_eval(eval_override)?;
    Ok(Loaded {
        queries: run.queries(&eval)?,
        pool: TrainingPool::from_dataset(&train)?,
        templates: run.templates()?,
        backend: run.backend()?,
        index,
        eval,
    })
}

fn summarize(method: Method, preds: &[(String, Verdict)], path: &Path) -> RunSummary {
    RunSummary {
        method: method.as_str(),
        notes: preds.len(),
        flagged: preds.iter().filter(|(_, v)| v.error_flag).count(),
        failed: preds
            .iter()
            .filter(|(_, v)| v.provenance == medcorr_core::context::FAILED)
            .count(),
        predictions: path.display().to_string(),
    }
}

fn run_cot(run: &Run, l: &Loaded) -> Result<Vec<(String, Verdict)>> {
    let pipeline = CotPipeline::new(l.ctx(run), &run.cfg.cascade)?;
    let out = pipeline.run(&l.eval, &l.queries, run.cfg.jobs);
    let dir = run.write_dir("cot")?;
    let rows = Run::predictions_rows(&out.predictions);
    write_predictions(&dir.join("predictions.csv"), Some(&run.header), &rows)?;
    write_jsonl(&dir.join("trace.jsonl"), Some(&run.header), &out.traces)?;
    run.report_if_annotated(&l.eval, &dir, &rows)?;
    Ok(out.predictions)
}

fn run_reason(run: &Run, l: &Loaded, bank: &ReasonBank) -> Result<Vec<(String, Verdict)>> {
    let missing = bank.missing(&run.load_train()?);
    if !missing.is_empty() {
        return Err(MissingPrerequisite {
            what: format!("reasons for {} training note(s), first {}", missing.len(), missing[0]),
            path: run.layout.reasons().display().to_string(),
            hint: "run `medcorr reasons build` to fill them in".into(),
        }
        .into());
    }
    let pipeline = ReasonPipeline::new(l.ctx(run), bank, &run.cfg.retrieval)?;
    let out = pipeline.run(&l.eval, &l.queries, run.cfg.seed, run.cfg.jobs);
    let dir = run.write_dir("reason")?;
    let rows = Run::predictions_rows(&out.predictions);
    write_predictions(&dir.join("predictions.csv"), Some(&run.header), &rows)?;
    write_jsonl(&dir.join("trace.jsonl"), Some(&run.header), &out.traces)?;
    run.report_if_annotated(&l.eval, &dir, &rows)?;
    Ok(out.predictions)
}

/// Reuses a sub-run's predictions when they were produced under the same
/// header and cover the eval split; otherwise returns `None`.
fn reusable(run: &Run, method: &str, eval: &Dataset) -> Option<Vec<(String, Verdict)>> {
    let path = run.layout.predictions(method);
    let first = fs::read_to_string(&path).ok()?.lines().next()?.to_string();
    if RunHeader::parse(&first).as_ref() != Some(&run.header) {
        return None;
    }
    let rows = read_predictions(&path).ok()?;
    let mut ids: Vec<&str> = rows.iter().map(|r| r.note_id.as_str()).collect();
    let mut want: Vec<&str> = eval.notes().map(|n| n.note_id.as_str()).collect();
    ids.sort_unstable();
    want.sort_unstable();
    if ids != want {
        return None;
    }
    log::info!("reusing {}", path.display());
    Some(rows.iter().map(|r| (r.note_id.clone(), r.to_verdict(method))).collect())
}

pub fn run_method(run: &Run, method: Method, eval_override: Option<&Path>) -> Result<RunSummary> {
    let bank = match method {
        Method::Cot => None,
        Method::Reason | Method::Ensemble => Some(run.load_bank()?),
    };
    let l = load_for_run(run, eval_override)?;
    let preds = match method {
        Method::Cot => run_cot(run, &l)?,
        Method::Reason => run_reason(run, &l, bank.as_ref().unwrap())?,
        Method::Ensemble => {
            let cot = match reusable(run, "cot", &l.eval) {
                Some(p) => p,
                None => run_cot(run, &l)?,
            };
            let reason = match reusable(run, "reason", &l.eval) {
                Some(p) => p,
                None => run_reason(run, &l, bank.as_ref().unwrap())?,
            };
            let regen =
                PromptRegenerator::new(l.ctx(run), l.eval.notes(), &l.queries, run.cfg.cascade.retrieval.k_shot);
            let decisions = merge(&cot, &reason, &regen, run.cfg.jobs)?;
            let dir = run.write_dir("ensemble")?;
            write_jsonl(&dir.join("audit.jsonl"), Some(&run.header), &decisions)?;
            let preds = merged_predictions(&decisions);
            let rows = Run::predictions_rows(&preds);
            write_predictions(&dir.join("predictions.csv"), Some(&run.header), &rows)?;
            run.report_if_annotated(&l.eval, &dir, &rows)?;
            preds
        }
    };
    Ok(summarize(method, &preds, &run.layout.predictions(method.as_str())))
}

/// Reads predictions or references: prediction-format CSV, or any dataset file.
pub fn read_rows(path: &Path) -> Result<Vec<Prediction>> {
    match Format::from_path(path) {
        Format::Jsonl => {
            let d = load_dataset(path, Format::Jsonl, DatasetName::Custom)?;
            Ok(Prediction::from_dataset(&d))
        }
        Format::Csv => Ok(read_predictions(path)?),
    }
}

pub fn evaluate(
    run: &Run,
    pred: &Path,
    reference: &Path,
    name: &str,
    stem: &str,
) -> Result<medcorr_core::eval::EvaluationReport> {
    let preds = read_rows(pred)?;
    let refs = read_rows(reference)?;
    let scorer = run.scorer();
    let (report, notes) = build_report(name, &preds, &refs, scorer.as_ref().map(|s| s as &dyn PairScorer))?;
    write_report(&run.layout.out, stem, Some(&run.header), std::slice::from_ref(&report))?;
    write_jsonl(
        &run.layout.out.join(format!("{stem}_notes.jsonl")),
        Some(&run.header),
        &notes,
    )?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationCell {
    pub shots: usize,
    pub cot: bool,
    pub n_correct: usize,
    pub n_incorrect: usize,
    pub notes: usize,
    pub acc_subtask1: f64,
}

#[derive(Debug, Serialize)]
struct AblationTrace<'a> {
    shots: usize,
    cot: bool,
    n_correct: usize,
    n_incorrect: usize,
    note_id: &'a str,
    examples: Vec<String>,
    example_errors: usize,
    stages: usize,
    error_flag: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

/// Detection accuracy over a shots × chain-of-thought grid.
pub fn ablate(run: &Run, shots: &[usize], eval_override: Option<&Path>) -> Result<Vec<AblationCell>> {
    if shots.is_empty() {
        bail!("no shot counts given");
    }
    if shots.contains(&0) {
        bail!("shot count 0 is not supported: the prompts need at least one example");
    }
    let l = load_for_run(run, eval_override)?;
    if let Some(e) = l.eval.entries.iter().find(|e| e.annotation.is_none()) {
        bail!(
            "ablation needs an annotated eval split; {} has no annotation",
            e.note.note_id
        );
    }
    let refs: BTreeMap<&str, bool> = l
        .eval
        .entries
        .iter()
        .map(|e| (e.note.note_id.as_str(), e.annotation.as_ref().unwrap().error_flag))
        .collect();
    let dir = run.write_dir("ablation")?;
    let mut cells = Vec::new();
    let mut traces = Vec::new();
    for &s in shots {
        let retrieval = RetrievalConfig::for_shots(s, run.cfg.cascade.retrieval.pool_k)?;
        for cot in [false, true] {
            let stage_order = if cot {
                run.cfg.cascade.stage_order.clone()
            } else {
                vec![TemplateName::StandardDetect]
            };
            let cfg = CascadeConfig {
                stage_order,
                retrieval,
                selection: ExampleSelection::Balanced,
            };
            let pipeline = CotPipeline::new(l.ctx(run), &cfg)?;
            let results = medcorr_core::context::parallel_map(run.cfg.jobs, &l.eval.entries, |entry| {
                let note = &entry.note;
                l.queries
                    .get(&note.note_id)
                    .ok_or_else(|| anyhow!("no embedding for {}", note.note_id))
                    .and_then(|q| Ok(pipeline.detect_and_locate(note, q)?))
            });
            let mut hits = 0;
            for (entry, r) in l.eval.entries.iter().zip(results) {
                let id = entry.note.note_id.as_str();
                let mut t = AblationTrace {
                    shots: s,
                    cot,
                    n_correct: retrieval.n_correct,
                    n_incorrect: retrieval.n_incorrect,
                    note_id: id,
                    examples: Vec::new(),
                    example_errors: 0,
                    stages: 0,
                    error_flag: false,
                    error: None,
                };
                match r {
                    Ok((verdict, trace)) => {
                        t.example_errors = trace
                            .examples
                            .iter()
                            .filter(|x| l.pool.get(x).is_some_and(|(_, a)| a.error_flag))
                            .count();
                        t.examples = trace.examples;
                        t.stages = trace.stages.len();
                        t.error_flag = verdict.error_flag;
                    }
                    Err(e) => t.error = Some(e.to_string()),
                }
                if t.error.is_none() && t.error_flag == refs[id] {
                    hits += 1;
                }
                traces.push(t);
            }
            cells.push(AblationCell {
                shots: s,
                cot,
                n_correct: retrieval.n_correct,
                n_incorrect: retrieval.n_incorrect,
                notes: l.eval.len(),
                acc_subtask1: hits as f64 / l.eval.len().max(1) as f64,
            });
        }
    }
    traces.sort_by(|a, b| (a.shots, a.cot, a.note_id).cmp(&(b.shots, b.cot, b.note_id)));
    write_jsonl(&dir.join("trace.jsonl"), Some(&run.header), &traces)?;
    let mut csv = format!(
        "{}\nshots,cot,n_correct,n_incorrect,notes,acc_subtask1\n",
        run.header.line()
    );
    for c in &cells {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            c.shots,
            if c.cot { "on" } else { "off" },
            c.n_correct,
            c.n_incorrect,
            c.notes,
            c.acc_subtask1
        ));
    }
    let path = dir.join("ablation.csv");
    fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    Ok(cells)
}
