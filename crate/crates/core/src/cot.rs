//! Detection cascade followed by an independent correction prompt.
//!
//! Detection runs the standard prompt first, then each chain-of-thought
//! prompt in turn, and stops at the first stage that reports an error. If no
//! stage does, the note is called error-free. A located error is then
//! corrected with a separate prompt that names the sentence id.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::context::{parallel_map, PipelineContext, PipelineError, QueryEmbeddings, Result, FAILED};
use crate::corpus::{ClinicalNote, Dataset};
use crate::llm::ask;
use crate::prompt::{parse_correction, parse_verdict, IclExample, TemplateName, Verdict};
use crate::retrieval::{balanced_sample, knn, Embedding, Neighbor, RetrievalConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExampleSelection {
    /// The `k_shot` nearest training notes regardless of label.
    Nearest,
    /// `n_correct` + `n_incorrect` nearest notes of each class.
    Balanced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CascadeConfig {
    pub stage_order: Vec<TemplateName>,
    pub retrieval: RetrievalConfig,
    pub selection: ExampleSelection,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            stage_order: vec![
                TemplateName::StandardDetect,
                TemplateName::CotIntervention,
                TemplateName::CotDiagnosis,
                TemplateName::CotManagement,
            ],
            retrieval: RetrievalConfig::default(),
            selection: ExampleSelection::Balanced,
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(PipelineError::Config(m));
        match self.stage_order.first() {
            None => return fail("stage_order is empty".into()),
            Some(&first) if first != TemplateName::StandardDetect => {
                return fail(format!("stage_order must begin with STANDARD_DETECT, not {first}"))
            }
            _ => {}
        }
        let mut seen = HashSet::new();
        for &t in &self.stage_order {
            if !t.is_detection() {
                return fail(format!("{t} is not a detection template"));
            }
            if !seen.insert(t) {
                return fail(format!("{t} appears twice in stage_order"));
            }
        }
        self.retrieval.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub template: TemplateName,
    pub prompt_hash: String,
    pub verdict: Verdict,
    pub reminded: bool,
    /// Set when the model flagged a sentence id the note does not have; the
    /// stage then counts as no detection.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rejected_sentence_id: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionRecord {
    pub prompt_hash: String,
    pub reminded: bool,
    pub corrected: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeTrace {
    pub note_id: String,
    /// Retrieved example ids in prompt order.
    pub examples: Vec<String>,
    pub stages: Vec<StageRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correction: Option<CorrectionRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl CascadeTrace {
    fn new(note_id: &str) -> Self {
        Self {
            note_id: note_id.to_string(),
            examples: Vec::new(),
            stages: Vec::new(),
            correction: None,
            error: None,
        }
    }
}

pub struct CotPipeline<'a> {
    pub ctx: PipelineContext<'a>,
    pub cfg: &'a CascadeConfig,
}

/// Predictions and per-note traces of a whole-dataset run, ordered by note id.
#[derive(Debug, Clone, PartialEq)]
pub struct CotRun {
    pub predictions: Vec<(String, Verdict)>,
    pub traces: Vec<CascadeTrace>,
}

impl<'a> CotPipeline<'a> {
    pub fn new(ctx: PipelineContext<'a>, cfg: &'a CascadeConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { ctx, cfg })
    }

    fn neighbors(&self, query: &Embedding) -> Result<Vec<Neighbor>> {
        Ok(match self.cfg.selection {
            ExampleSelection::Nearest => knn(self.ctx.index, query, self.cfg.retrieval.k_shot)?,
            ExampleSelection::Balanced => balanced_sample(self.ctx.index, query, &self.cfg.retrieval)?,
        })
    }

    /// In-context examples for a note, shared by every stage of its cascade.
    pub fn examples(&self, query: &Embedding) -> Result<Vec<IclExample>> {
        self.ctx.train.examples(&self.neighbors(query)?)
    }

    /// Runs the detection cascade with the note's retrieved examples.
    pub fn detect_and_locate(&self, note: &ClinicalNote, query: &Embedding) -> Result<(Verdict, CascadeTrace)> {
        let examples = self.examples(query)?;
        let mut trace = CascadeTrace::new(&note.note_id);
        trace.examples = examples.iter().map(|e| e.note.note_id.clone()).collect();
        let verdict = self.cascade(note, &examples, &mut trace)?;
        Ok((verdict, trace))
    }

    fn cascade(&self, note: &ClinicalNote, examples: &[IclExample], trace: &mut CascadeTrace) -> Result<Verdict> {
        let g = self.ctx.generation;
        for &stage in &self.cfg.stage_order {
            let user = self.ctx.templates.render(stage, note, examples, &BTreeMap::new())?;
            let req = g.request(
                self.ctx.templates.system(),
                user,
                g.deterministic_temperature,
                format!("{}/{}", note.note_id, stage),
            );
            let asked = ask(self.ctx.backend, &req, parse_verdict)?;
            let mut verdict = asked.value.with_provenance(stage.as_str());
            let mut rejected = None;
            if verdict.error_flag {
                let id = verdict.error_sentence_id.expect("parsed yes carries an id");
                if note.has_sentence(id) {
                    trace.stages.push(StageRecord {
                        template: stage,
                        prompt_hash: asked.prompt_hash,
                        verdict: verdict.clone(),
                        reminded: asked.reminded,
                        rejected_sentence_id: None,
                    });
                    verdict.corrected_sentence = None;
                    return Ok(verdict);
                }
                log::debug!("{}: {stage} flagged sentence {id}, which does not exist", note.note_id);
                rejected = Some(id);
                verdict = Verdict::no_error(stage.as_str());
            }
            trace.stages.push(StageRecord {
                template: stage,
                prompt_hash: asked.prompt_hash,
                verdict,
                reminded: asked.reminded,
                rejected_sentence_id: rejected,
            });
        }
        Ok(Verdict::no_error(
            self.cfg.stage_order.last().map(|t| t.as_str()).unwrap_or_default(),
        ))
    }

    /// Asks for a corrected version of `sentence_id`.
    pub fn correct(&self, note: &ClinicalNote, sentence_id: usize, query: &Embedding) -> Result<String> {
        let examples = self.examples(query)?;
        self.correct_with(note, sentence_id, &examples).map(|(c, _)| c)
    }

    fn correct_with(
        &self,
        note: &ClinicalNote,
        sentence_id: usize,
        examples: &[IclExample],
    ) -> Result<(String, CorrectionRecord)> {
        if !note.has_sentence(sentence_id) {
            return Err(PipelineError::Precondition(format!(
                "note {} has no sentence {sentence_id}",
                note.note_id
            )));
        }
        let g = self.ctx.generation;
        let extra = BTreeMap::from([("sentence_id".to_string(), sentence_id.to_string())]);
        let user = self
            .ctx
            .templates
            .render(TemplateName::Correction, note, examples, &extra)?;
        let req = g.request(
            self.ctx.templates.system(),
            user,
            g.deterministic_temperature,
            format!("{}/{}", note.note_id, TemplateName::Correction),
        );
        let asked = ask(self.ctx.backend, &req, parse_correction)?;
        let record = CorrectionRecord {
            prompt_hash: asked.prompt_hash,
            reminded: asked.reminded,
            corrected: Some(asked.value.clone()),
            error: None,
        };
        Ok((asked.value, record))
    }

    /// Detection then, for flagged notes, correction. Correction failures keep
    /// the detection result with no corrected sentence.
    pub fn process(&self, note: &ClinicalNote, query: &Embedding) -> Result<(Verdict, CascadeTrace)> {
        let examples = self.examples(query)?;
        let mut trace = CascadeTrace::new(&note.note_id);
        trace.examples = examples.iter().map(|e| e.note.note_id.clone()).collect();
        let mut verdict = self.cascade(note, &examples, &mut trace)?;
        if let (true, Some(id)) = (verdict.error_flag, verdict.error_sentence_id) {
            match self.correct_with(note, id, &examples) {
                Ok((corrected, record)) => {
                    verdict.corrected_sentence = Some(corrected);
                    trace.correction = Some(record);
                }
                Err(e) => {
                    log::warn!("{}: correction failed: {e}", note.note_id);
                    trace.correction = Some(CorrectionRecord {
                        prompt_hash: String::new(),
                        reminded: false,
                        corrected: None,
                        error: Some(e.to_string()),
                    });
                }
            }
        }
        Ok((verdict, trace))
    }

    /// Runs every note of `dataset`. Per-note failures become `FAILED`
    /// verdicts; the run itself does not abort.
    pub fn run(&self, dataset: &Dataset, queries: &QueryEmbeddings, jobs: usize) -> CotRun {
        let results = parallel_map(jobs, &dataset.entries, |entry| {
            let note = &entry.note;
            let outcome = self
                .ctx
                .query(queries, &note.note_id)
                .and_then(|q| self.process(note, q));
            match outcome {
                Ok(pair) => pair,
                Err(e) => {
                    log::warn!("{}: {e}", note.note_id);
                    let mut trace = CascadeTrace::new(&note.note_id);
                    trace.error = Some(e.to_string());
                    (Verdict::no_error(FAILED), trace)
                }
            }
        });
        let mut paired: Vec<(String, Verdict, CascadeTrace)> =
            results.into_iter().map(|(v, t)| (t.note_id.clone(), v, t)).collect();
        paired.sort_by(|a, b| a.0.cmp(&b.0));
        let (predictions, traces) = paired.into_iter().map(|(id, v, t)| ((id, v), t)).unzip();
        CotRun { predictions, traces }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::TrainingPool;
    use crate::corpus::{DatasetEntry, DatasetName, ErrorAnnotation};
    use crate::llm::{GenerationConfig, LlmError, MockBackend};
    use crate::prompt::TemplateSet;
    use crate::retrieval::{IndexEntry, VectorIndex};

    pub(crate) struct Fixture {
        pub index: VectorIndex,
        pub train: TrainingPool,
        pub templates: TemplateSet,
        pub generation: GenerationConfig,
        pub cfg: CascadeConfig,
    }

    impl Fixture {
        pub fn new() -> Self {
            let mut entries = Vec::new();
            let mut d = Dataset::new(DatasetName::MsTrain);
            for i in 0..6 {
                let flag = i % 2 == 1;
                let id = format!("t{i}");
                let t = i as f64 * 0.2;
                entries.push(IndexEntry {
                    note_id: id.clone(),
                    embedding: Embedding::new(vec![t.cos(), t.sin()]).unwrap(),
                    error_flag: flag,
                });
                d.entries.push(DatasetEntry {
                    note: ClinicalNote::from_numbered(&id, format!("0 Train {i} a.\n1 Train {i} b.")).unwrap(),
                    annotation: Some(if flag {
                        ErrorAnnotation::error(1, format!("Train {i} fixed."))
                    } else {
                        ErrorAnnotation::no_error()
                    }),
                });
            }
            Self {
                index: VectorIndex::build("test", entries).unwrap(),
                train: TrainingPool::from_dataset(&d).unwrap(),
                templates: TemplateSet::builtin(),
                generation: GenerationConfig::default(),
                cfg: CascadeConfig::default(),
            }
        }

        pub fn pipeline<'a>(&'a self, backend: &'a MockBackend) -> CotPipeline<'a> {
            CotPipeline::new(
                PipelineContext {
                    index: &self.index,
                    train: &self.train,
                    templates: &self.templates,
                    backend,
                    generation: &self.generation,
                },
                &self.cfg,
            )
            .unwrap()
        }
    }

    fn note() -> ClinicalNote {
        ClinicalNote::from_numbered("n1", "0 A.\n1 B.\n2 C.\n3 D.\n4 E.").unwrap()
    }

    fn q() -> Embedding {
        Embedding::new(vec![1.0, 0.05]).unwrap()
    }

    #[test]
    fn stops_at_first_reporting_stage() {
        let fx = Fixture::new();
        let mock = MockBackend::from_sequence(["ERROR: no", "ERROR: yes SENTENCE_ID: 3"]);
        let (v, trace) = fx.pipeline(&mock).detect_and_locate(&note(), &q()).unwrap();
        assert_eq!(v, Verdict::error(3, None, "COT_INTERVENTION"));
        assert_eq!(trace.stages.len(), 2);
        assert_eq!(mock.calls(), 2);
        assert_eq!(trace.examples.len(), 4);
    }

    #[test]
    fn exhausted_cascade_is_error_free() {
        let fx = Fixture::new();
        let mock = MockBackend::fixed("ERROR: no");
        let (v, trace) = fx.pipeline(&mock).detect_and_locate(&note(), &q()).unwrap();
        assert!(!v.error_flag);
        assert_eq!(trace.stages.len(), 4);
        assert_eq!(mock.calls(), 4);
    }

    #[test]
    fn first_stage_hit_skips_cot() {
        let fx = Fixture::new();
        let mock = MockBackend::fixed("ERROR: yes\nSENTENCE_ID: 0");
        let (v, trace) = fx.pipeline(&mock).detect_and_locate(&note(), &q()).unwrap();
        assert_eq!(v.provenance, "STANDARD_DETECT");
        assert_eq!(trace.stages.len(), 1);
        assert_eq!(mock.calls(), 1);
        assert!(mock.requests()[0].seed_tag.ends_with("/STANDARD_DETECT"));
    }

    #[test]
    fn out_of_range_id_continues_cascade() {
        let fx = Fixture::new();
        let mock = MockBackend::from_sequence(["ERROR: yes\nSENTENCE_ID: 40", "ERROR: yes\nSENTENCE_ID: 2"]);
        let (v, trace) = fx.pipeline(&mock).detect_and_locate(&note(), &q()).unwrap();
        assert_eq!(v.error_sentence_id, Some(2));
        assert_eq!(trace.stages[0].rejected_sentence_id, Some(40));
        assert!(!trace.stages[0].verdict.error_flag);
    }

    #[test]
    fn reminder_retry_is_not_a_stage() {
        let fx = Fixture::new();
        let mock = MockBackend::from_sequence(["hmm", "ERROR: no", "ERROR: yes\nSENTENCE_ID: 1"]);
        let (v, trace) = fx.pipeline(&mock).detect_and_locate(&note(), &q()).unwrap();
        assert_eq!(v.provenance, "COT_INTERVENTION");
        assert_eq!(trace.stages.len(), 2);
        assert!(trace.stages[0].reminded);
    }

    #[test]
    fn correction_returns_payload() {
        let fx = Fixture::new();
        let mock = MockBackend::fixed("CORRECTED: He received ceftriaxone.");
        let c = fx.pipeline(&mock).correct(&note(), 2, &q()).unwrap();
        assert_eq!(c, "He received ceftriaxone.");
        let user = &mock.requests()[0].user;
        assert!(user.contains("error in sentence 2"));
    }

    #[test]
    fn correction_picks_the_keyed_line_from_prose() {
        let fx = Fixture::new();
        let mock =
            MockBackend::fixed("Sentence 2 names the wrong drug.\nCORRECTED: Start IV ceftriaxone.\nThat is all.");
        assert_eq!(
            fx.pipeline(&mock).correct(&note(), 2, &q()).unwrap(),
            "Start IV ceftriaxone."
        );
    }

    #[test]
    fn correction_rejects_invalid_sentence() {
        let fx = Fixture::new();
        let mock = MockBackend::fixed("CORRECTED: x");
        assert!(matches!(
            fx.pipeline(&mock).correct(&note(), 99, &q()),
            Err(PipelineError::Precondition(_))
        ));
        assert_eq!(mock.calls(), 0);
    }

    fn dataset(ids: &[&str]) -> Dataset {
        let mut d = Dataset::new(DatasetName::MsVal);
        for id in ids {
            d.entries.push(DatasetEntry {
                note: ClinicalNote::from_numbered(*id, "0 A.\n1 B.").unwrap(),
                annotation: None,
            });
        }
        d
    }

    #[test]
    fn run_orders_by_note_id_and_isolates_failures() {
        let fx = Fixture::new();
        let mock = MockBackend::from_fn(|r| {
            if r.seed_tag.starts_with("bad/") {
                Some(Err(LlmError::BackendUnavailable("boom".into())))
            } else if r.seed_tag.ends_with("CORRECTION") {
                Some(Ok("CORRECTED: Fixed B.".into()))
            } else {
                Some(Ok("ERROR: yes\nSENTENCE_ID: 1".into()))
            }
        });
        let d = dataset(&["c", "bad", "a"]);
        let queries: QueryEmbeddings = ["a", "bad", "c"].iter().map(|id| (id.to_string(), q())).collect();
        let run = fx.pipeline(&mock).run(&d, &queries, 3);
        let ids: Vec<_> = run.predictions.iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(ids, ["a", "bad", "c"]);
        assert_eq!(run.predictions[1].1.provenance, FAILED);
        assert!(run.traces[1].error.is_some());
        assert_eq!(
            run.predictions[0].1,
            Verdict::error(1, Some("Fixed B.".into()), "STANDARD_DETECT")
        );
    }

    #[test]
    fn empty_dataset_gives_empty_run() {
        let fx = Fixture::new();
        let mock = MockBackend::fixed("ERROR: no");
        let run = fx.pipeline(&mock).run(&dataset(&[]), &QueryEmbeddings::new(), 2);
        assert!(run.predictions.is_empty());
    }

    #[test]
    fn config_validation() {
        let mut c = CascadeConfig::default();
        assert!(c.validate().is_ok());
        c.stage_order = vec![TemplateName::CotDiagnosis];
        assert!(c.validate().is_err());
        c.stage_order = vec![TemplateName::StandardDetect, TemplateName::StandardDetect];
        assert!(c.validate().is_err());
        c.stage_order = vec![TemplateName::StandardDetect, TemplateName::Correction];
        assert!(c.validate().is_err());
        c.stage_order = vec![];
        assert!(c.validate().is_err());
    }
}
