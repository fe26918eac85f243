//! Rule-based merge of the cascade and reason-method predictions.
//!
//! The error flag and sentence id always come from the cascade. The
//! correction comes from the reason method when both methods flag the same
//! sentence; otherwise it is regenerated with a dedicated prompt that names
//! the cascade's sentence id.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{parallel_map, PipelineContext, PipelineError, QueryEmbeddings};
use crate::corpus::ClinicalNote;
use crate::llm::ask;
use crate::prompt::{parse_correction, TemplateName, Verdict};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnsembleError {
    #[error("prediction sets differ: {only_cot} note(s) only in cascade output, {only_reason} only in reason output (first: {first:?})")]
    MisalignedIds {
        only_cot: usize,
        only_reason: usize,
        first: String,
    },
    #[error("duplicate note id {0:?} in predictions")]
    DuplicateNoteId(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FlagSource {
    Cot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CorrectionSource {
    Reason,
    Cot,
    Regenerated,
    None,
}

/// Which merge rule decided the correction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MergeRule {
    /// Cascade says no error: final is no error.
    CotNoError,
    /// Both flag the same sentence: the reason method's correction is kept.
    Agree,
    /// Both flag an error at different sentences: regenerate.
    IdConflict,
    /// Cascade flags an error, the reason method does not: regenerate.
    ReasonNoError,
}

impl MergeRule {
    pub fn classify(cot: &Verdict, reason: &Verdict) -> Self {
        match (cot.error_flag, reason.error_flag) {
            (false, _) => Self::CotNoError,
            (true, false) => Self::ReasonNoError,
            (true, true) if cot.error_sentence_id == reason.error_sentence_id => Self::Agree,
            (true, true) => Self::IdConflict,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeDecision {
    pub note_id: String,
    pub source_flag: FlagSource,
    pub source_span: FlagSource,
    pub source_correction: CorrectionSource,
    pub rule: MergeRule,
    pub final_verdict: Verdict,
    /// Why regeneration was skipped or failed, when it was.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Produces a corrected sentence for `sentence_id` of a note.
pub trait Regenerator: Sync {
    fn regenerate(&self, note_id: &str, sentence_id: usize) -> Result<String, String>;
}

impl<F> Regenerator for F
where
    F: Fn(&str, usize) -> Result<String, String> + Sync,
{
    fn regenerate(&self, note_id: &str, sentence_id: usize) -> Result<String, String> {
        self(note_id, sentence_id)
    }
}

/// Regenerates corrections with the ensemble-correction prompt, using the
/// `k_shot` most similar error-containing training notes as examples.
pub struct PromptRegenerator<'a> {
    pub ctx: PipelineContext<'a>,
    pub notes: HashMap<&'a str, &'a ClinicalNote>,
    pub queries: &'a QueryEmbeddings,
    pub k_shot: usize,
}

impl<'a> PromptRegenerator<'a> {
    pub fn new(
        ctx: PipelineContext<'a>,
        notes: impl IntoIterator<Item = &'a ClinicalNote>,
        queries: &'a QueryEmbeddings,
        k_shot: usize,
    ) -> Self {
        Self {
            ctx,
            notes: notes.into_iter().map(|n| (n.note_id.as_str(), n)).collect(),
            queries,
            k_shot,
        }
    }

    fn run(&self, note_id: &str, sentence_id: usize) -> Result<String, PipelineError> {
        let note = self
            .notes
            .get(note_id)
            .ok_or_else(|| PipelineError::Precondition(format!("note {note_id} not loaded")))?;
        let query = self.ctx.query(self.queries, note_id)?;
        let neighbors: Vec<_> = self
            .ctx
            .index
            .rank_all(query)?
            .into_iter()
            .filter(|n| n.error_flag)
            .take(self.k_shot)
            .collect();
        let examples = self.ctx.train.examples(&neighbors)?;
        let extra = BTreeMap::from([("sentence_id".to_string(), sentence_id.to_string())]);
        let user = self
            .ctx
            .templates
            .render(TemplateName::EnsembleCorrection, note, &examples, &extra)?;
        let g = self.ctx.generation;
        let req = g.request(
            self.ctx.templates.system(),
            user,
            g.deterministic_temperature,
            format!("{note_id}/{}", TemplateName::EnsembleCorrection),
        );
        Ok(ask(self.ctx.backend, &req, parse_correction)?.value)
    }
}

impl Regenerator for PromptRegenerator<'_> {
    fn regenerate(&self, note_id: &str, sentence_id: usize) -> Result<String, String> {
        self.run(note_id, sentence_id).map_err(|e| e.to_string())
    }
}

fn index_by_id(preds: &[(String, Verdict)]) -> Result<BTreeMap<&str, &Verdict>, EnsembleError> {
    let mut map = BTreeMap::new();
    for (id, v) in preds {
        if map.insert(id.as_str(), v).is_some() {
            return Err(EnsembleError::DuplicateNoteId(id.clone()));
        }
    }
    Ok(map)
}

/// Merges the two prediction lists note by note; output is ordered by note id.
pub fn merge(
    cot: &[(String, Verdict)],
    reason: &[(String, Verdict)],
    regen: &dyn Regenerator,
    jobs: usize,
) -> Result<Vec<MergeDecision>, EnsembleError> {
    let c = index_by_id(cot)?;
    let r = index_by_id(reason)?;
    let only_cot: Vec<&str> = c.keys().filter(|k| !r.contains_key(*k)).copied().collect();
    let only_reason: Vec<&str> = r.keys().filter(|k| !c.contains_key(*k)).copied().collect();
    if !only_cot.is_empty() || !only_reason.is_empty() {
        return Err(EnsembleError::MisalignedIds {
            only_cot: only_cot.len(),
            only_reason: only_reason.len(),
            first: only_cot.first().or(only_reason.first()).unwrap().to_string(),
        });
    }
    let pairs: Vec<(&str, &Verdict, &Verdict)> = c.iter().map(|(id, v)| (*id, *v, r[id])).collect();
    Ok(parallel_map(jobs, &pairs, |&(id, cv, rv)| decide(id, cv, rv, regen)))
}

fn decide(note_id: &str, cot: &Verdict, reason: &Verdict, regen: &dyn Regenerator) -> MergeDecision {
    let rule = MergeRule::classify(cot, reason);
    let mut decision = MergeDecision {
        note_id: note_id.to_string(),
        source_flag: FlagSource::Cot,
        source_span: FlagSource::Cot,
        source_correction: CorrectionSource::None,
        rule,
        final_verdict: Verdict {
            error_flag: cot.error_flag,
            error_sentence_id: cot.error_sentence_id,
            corrected_sentence: None,
            provenance: "ensemble".into(),
        },
        note: None,
    };
    if rule == MergeRule::CotNoError {
        decision.final_verdict.error_sentence_id = None;
        return decision;
    }
    let Some(sentence_id) = cot.error_sentence_id else {
        decision.note = Some("cascade flagged an error without a sentence id".into());
        return decision;
    };
    let reason_correction = match rule {
        MergeRule::Agree => reason.corrected_sentence.clone(),
        _ => None,
    };
    let (source, text) = match reason_correction {
        Some(text) => (CorrectionSource::Reason, Some(text)),
        None => {
            if rule == MergeRule::Agree {
                decision.note = Some("reason method gave no correction; regenerated".into());
            }
            match regen.regenerate(note_id, sentence_id) {
                Ok(text) => (CorrectionSource::Regenerated, Some(text)),
                Err(e) => {
                    log::warn!("{note_id}: regeneration failed: {e}");
                    decision.note = Some(format!("regeneration failed: {e}"));
                    match &cot.corrected_sentence {
                        Some(text) => (CorrectionSource::Cot, Some(text.clone())),
                        None => (CorrectionSource::None, None),
                    }
                }
            }
        }
    };
    decision.source_correction = source;
    decision.final_verdict.corrected_sentence = text;
    decision
}

/// Final predictions of a merge, in decision order.
pub fn merged_predictions(decisions: &[MergeDecision]) -> Vec<(String, Verdict)> {
    decisions
        .iter()
        .map(|d| (d.note_id.clone(), d.final_verdict.clone()))
        .collect()
}
