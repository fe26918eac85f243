//! Reason-augmented method: a precomputed bank of per-training-note reasons,
//! three sampled answers per note over re-drawn class-balanced examples, and
//! majority voting over the three.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::{read_jsonl, write_jsonl, ArtifactError, RunHeader};
use crate::context::{parallel_map, PipelineContext, PipelineError, QueryEmbeddings, Result, FAILED};
use crate::corpus::{ClinicalNote, Dataset, ErrorAnnotation};
use crate::digest::{sha256_hex, sha256_u64};
use crate::llm::{ask, AskError, Backend, GenerationConfig};
use crate::prompt::{parse_verdict, TemplateName, TemplateSet, Verdict};
use crate::retrieval::{balanced_pool, sort_ranked, Embedding, Neighbor, RetrievalConfig};

/// Number of sampled answers per note.
pub const SAMPLES: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasonEntry {
    pub note_id: String,
    pub reason: String,
    pub model_id: String,
    pub content_hash: String,
}

/// Hash of everything a reason depends on: the note text and its annotation.
pub fn content_hash(note: &ClinicalNote, annotation: &ErrorAnnotation) -> String {
    let payload = serde_json::json!({ "text": note.raw_text, "annotation": annotation });
    sha256_hex(payload.to_string())
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReasonBank {
    entries: BTreeMap<String, ReasonEntry>,
}

impl ReasonBank {
    pub fn get(&self, note_id: &str) -> Option<&ReasonEntry> {
        self.entries.get(note_id)
    }

    pub fn reason(&self, note_id: &str) -> Option<&str> {
        self.entries.get(note_id).map(|e| e.reason.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, entry: ReasonEntry) {
        self.entries.insert(entry.note_id.clone(), entry);
    }

    pub fn entries(&self) -> impl Iterator<Item = &ReasonEntry> {
        self.entries.values()
    }

    /// Training notes without a current reason (missing or stale hash).
    pub fn missing(&self, train: &Dataset) -> Vec<String> {
        train
            .entries
            .iter()
            .filter(|e| {
                let Some(a) = &e.annotation else { return true };
                self.entries
                    .get(&e.note.note_id)
                    .is_none_or(|r| r.content_hash != content_hash(&e.note, a))
            })
            .map(|e| e.note.note_id.clone())
            .collect()
    }

    pub fn save(&self, path: &Path, header: Option<&RunHeader>) -> Result<(), ArtifactError> {
        let rows: Vec<&ReasonEntry> = self.entries.values().collect();
        write_jsonl(path, header, &rows)
    }

    pub fn load(path: &Path) -> Result<Self, ArtifactError> {
        let rows: Vec<ReasonEntry> = read_jsonl(path)?;
        let mut bank = Self::default();
        for r in rows {
            bank.insert(r);
        }
        Ok(bank)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankBuild {
    pub bank: ReasonBank,
    pub generated: usize,
    pub reused: usize,
    /// Notes whose reason could not be generated; the bank is incomplete while non-empty.
    pub failures: Vec<(String, String)>,
}

impl BankBuild {
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Generates a reason for every training note, reusing entries from
/// `existing` whose content hash still matches.
pub fn build_reason_bank(
    train: &Dataset,
    existing: Option<&ReasonBank>,
    templates: &TemplateSet,
    backend: &dyn Backend,
    generation: &GenerationConfig,
    jobs: usize,
) -> Result<BankBuild> {
    let mut bank = ReasonBank::default();
    let mut todo = Vec::new();
    for e in &train.entries {
        let a = e.annotation.as_ref().ok_or_else(|| {
            PipelineError::Precondition(format!("training note {} has no annotation", e.note.note_id))
        })?;
        let hash = content_hash(&e.note, a);
        match existing.and_then(|b| b.get(&e.note.note_id)) {
            Some(r) if r.content_hash == hash => bank.insert(r.clone()),
            _ => todo.push((&e.note, a, hash)),
        }
    }
    let reused = bank.len();
    let results = parallel_map(jobs, &todo, |(note, annotation, hash)| {
        let user = templates.render_reason_request(note, annotation)?;
        let req = generation.request(
            templates.system(),
            user,
            generation.deterministic_temperature,
            format!("{}/REASON_GEN", note.note_id),
        );
        let resp = backend.complete(&req).map_err(AskError::from)?;
        let reason = resp.text.trim().to_string();
        if reason.is_empty() {
            return Err(PipelineError::Precondition("empty reason".into()));
        }
        Ok(ReasonEntry {
            note_id: note.note_id.clone(),
            reason,
            model_id: generation.model_id.clone(),
            content_hash: hash.clone(),
        })
    });
    let mut generated = 0;
    let mut failures = Vec::new();
    for ((note, _, _), r) in todo.iter().zip(results) {
        match r {
            Ok(entry) => {
                bank.insert(entry);
                generated += 1;
            }
            Err(e) => failures.push((note.note_id.clone(), e.to_string())),
        }
    }
    Ok(BankBuild {
        bank,
        generated,
        reused,
        failures,
    })
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VoteError {
    #[error("every vote abstained")]
    AllAbstained,
}

/// Resolves sampled answers. `None` marks an abstention.
///
/// The flag is the strict majority of non-abstaining votes (ties are
/// "no error"); the sentence id is the plurality among error votes with ties
/// to the lowest id; the correction is drawn uniformly, with `rng_seed`, from
/// the sorted corrections of votes that agree on both.
pub fn majority_vote(votes: &[Option<Verdict>], rng_seed: u64) -> Result<Verdict, VoteError> {
    let cast: Vec<&Verdict> = votes.iter().flatten().collect();
    if cast.is_empty() {
        return Err(VoteError::AllAbstained);
    }
    let yes: Vec<&Verdict> = cast.iter().copied().filter(|v| v.error_flag).collect();
    if yes.len() * 2 <= cast.len() {
        return Ok(Verdict::no_error("majority"));
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for v in &yes {
        if let Some(id) = v.error_sentence_id {
            *counts.entry(id).or_default() += 1;
        }
    }
    // BTreeMap iterates ascending; only a strictly larger count replaces the
    // current best, so ties keep the lowest id.
    let id = counts
        .iter()
        .fold(None, |best: Option<(usize, usize)>, (&id, &n)| match best {
            Some((_, bn)) if bn >= n => best,
            _ => Some((id, n)),
        })
        .map(|(id, _)| id)
        .expect("an error vote carries an id");
    let mut candidates: Vec<&str> = yes
        .iter()
        .filter(|v| v.error_sentence_id == Some(id))
        .filter_map(|v| v.corrected_sentence.as_deref())
        .collect();
    candidates.sort_unstable();
    let corrected = if candidates.is_empty() {
        None
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        Some(candidates[rng.gen_range(0..candidates.len())].to_string())
    };
    Ok(Verdict::error(id, corrected, "majority"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vote {
    pub provenance: String,
    pub examples: Vec<String>,
    pub prompt_hash: String,
    /// `None` when the sample abstained.
    pub verdict: Option<Verdict>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub abstain_reason: Option<String>,
}

/// The three samples of one note.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteSet {
    pub votes: Vec<Vote>,
}

impl VoteSet {
    pub fn verdicts(&self) -> Vec<Option<Verdict>> {
        self.votes.iter().map(|v| v.verdict.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonTrace {
    pub note_id: String,
    pub seed: u64,
    pub votes: Vec<Vote>,
    pub final_verdict: Verdict,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReasonRun {
    pub predictions: Vec<(String, Verdict)>,
    pub traces: Vec<ReasonTrace>,
}

/// Per-note seed derived from the run seed.
pub fn note_seed(run_seed: u64, note_id: &str) -> u64 {
    sha256_u64(format!("{run_seed}/{note_id}"))
}

pub struct ReasonPipeline<'a> {
    pub ctx: PipelineContext<'a>,
    pub bank: &'a ReasonBank,
    pub cfg: &'a RetrievalConfig,
}

impl<'a> ReasonPipeline<'a> {
    pub fn new(ctx: PipelineContext<'a>, bank: &'a ReasonBank, cfg: &'a RetrievalConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { ctx, bank, cfg })
    }

    /// Example ids for each of the three samples. The first sample takes the
    /// top-ranked notes of each class; the others draw from the class-balanced
    /// pool with a seeded RNG.
    pub fn draw_examples(&self, query: &Embedding, seed: u64) -> Result<Vec<Vec<Neighbor>>> {
        let pool = balanced_pool(self.ctx.index, query, self.cfg)?;
        let mut draws = Vec::with_capacity(SAMPLES);
        for s in 0..SAMPLES {
            let mut picked: Vec<Neighbor> = if s == 0 {
                pool.correct[..self.cfg.n_correct]
                    .iter()
                    .chain(&pool.incorrect[..self.cfg.n_incorrect])
                    .cloned()
                    .collect()
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(sha256_u64(format!("{seed}/sample_{}", s + 1)));
                pool.correct
                    .choose_multiple(&mut rng, self.cfg.n_correct)
                    .chain(pool.incorrect.choose_multiple(&mut rng, self.cfg.n_incorrect))
                    .cloned()
                    .collect()
            };
            sort_ranked(&mut picked);
            draws.push(picked);
        }
        Ok(draws)
    }

    fn sample(&self, note: &ClinicalNote, examples: &[Neighbor], label: &str) -> Result<Vote> {
        let icl = examples
            .iter()
            .map(|n| {
                let reason = self
                    .bank
                    .reason(&n.note_id)
                    .ok_or_else(|| PipelineError::MissingReason(n.note_id.clone()))?;
                self.ctx.train.example(&n.note_id, Some(reason.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let g = self.ctx.generation;
        let user = self
            .ctx
            .templates
            .render(TemplateName::ReasonIcl, note, &icl, &BTreeMap::new())?;
        let req = g.request(
            self.ctx.templates.system(),
            user,
            g.sampling_temperature,
            format!("{}/{label}", note.note_id),
        );
        let prompt_hash = req.hash();
        let mut vote = Vote {
            provenance: label.to_string(),
            examples: examples.iter().map(|n| n.note_id.clone()).collect(),
            prompt_hash,
            verdict: None,
            abstain_reason: None,
        };
        match ask(self.ctx.backend, &req, parse_verdict) {
            Ok(asked) => {
                let v = asked.value.with_provenance(label);
                match v.error_sentence_id {
                    Some(id) if v.error_flag && !note.has_sentence(id) => {
                        vote.abstain_reason = Some(format!("sentence id {id} out of range"));
                    }
                    _ => vote.verdict = Some(v),
                }
            }
            Err(AskError::Unparseable(e)) => vote.abstain_reason = Some(e.to_string()),
            Err(e) => return Err(e.into()),
        }
        Ok(vote)
    }

    /// Three samples and their majority vote for one note.
    pub fn solve(&self, note: &ClinicalNote, query: &Embedding, rng_seed: u64) -> Result<(Verdict, VoteSet)> {
        let draws = self.draw_examples(query, rng_seed)?;
        let labels: Vec<String> = (1..=SAMPLES).map(|i| format!("sample_{i}")).collect();
        let indices: Vec<usize> = (0..SAMPLES).collect();
        let votes = parallel_map(SAMPLES, &indices, |&i| self.sample(note, &draws[i], &labels[i]))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let set = VoteSet { votes };
        let verdict = match majority_vote(&set.verdicts(), rng_seed) {
            Ok(v) => v,
            Err(VoteError::AllAbstained) => Verdict::no_error(FAILED),
        };
        Ok((verdict, set))
    }

    pub fn run(&self, dataset: &Dataset, queries: &QueryEmbeddings, run_seed: u64, jobs: usize) -> ReasonRun {
        let results = parallel_map(jobs, &dataset.entries, |entry| {
            let note = &entry.note;
            let seed = note_seed(run_seed, &note.note_id);
            let outcome = self
                .ctx
                .query(queries, &note.note_id)
                .and_then(|q| self.solve(note, q, seed));
            match outcome {
                Ok((verdict, set)) => ReasonTrace {
                    note_id: note.note_id.clone(),
                    seed,
                    votes: set.votes,
                    final_verdict: verdict,
                    error: None,
                },
                Err(e) => {
                    log::warn!("{}: {e}", note.note_id);
                    ReasonTrace {
                        note_id: note.note_id.clone(),
                        seed,
                        votes: Vec::new(),
                        final_verdict: Verdict::no_error(FAILED),
                        error: Some(e.to_string()),
                    }
                }
            }
        });
        let mut traces = results;
        traces.sort_by(|a, b| a.note_id.cmp(&b.note_id));
        let predictions = traces
            .iter()
            .map(|t| (t.note_id.clone(), t.final_verdict.clone()))
            .collect();
        ReasonRun { predictions, traces }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::TrainingPool;
    use crate::corpus::{DatasetEntry, DatasetName};
    use crate::llm::MockBackend;
    use crate::retrieval::{IndexEntry, VectorIndex};
    use proptest::prelude::*;

    fn yes(id: usize, c: &str) -> Option<Verdict> {
        Some(Verdict::error(id, Some(c.to_string()), "s"))
    }

    fn no() -> Option<Verdict> {
        Some(Verdict::no_error("s"))
    }

    #[test]
    fn two_of_three_error_votes_win() {
        let v = majority_vote(&[yes(5, "A"), yes(5, "A"), no()], 1).unwrap();
        assert_eq!((v.error_flag, v.error_sentence_id), (true, Some(5)));
    }

    #[test]
    fn unanimous_no() {
        assert!(!majority_vote(&[no(), no(), no()], 1).unwrap().error_flag);
    }

    #[test]
    fn agreeing_corrections_are_chosen_by_seed() {
        let votes = [yes(5, "A"), yes(5, "B"), no()];
        let mut seen = std::collections::BTreeSet::new();
        for seed in 0..64 {
            let v = majority_vote(&votes, seed).unwrap();
            assert_eq!(v.error_sentence_id, Some(5));
            seen.insert(v.corrected_sentence.unwrap());
            assert_eq!(majority_vote(&votes, seed), majority_vote(&votes, seed));
        }
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), ["A", "B"]);
    }

    #[test]
    fn split_ids_tie_to_lowest() {
        let v = majority_vote(&[yes(1, "x"), yes(2, "y"), no()], 9).unwrap();
        assert_eq!((v.error_flag, v.error_sentence_id), (true, Some(1)));
        assert_eq!(v.corrected_sentence.as_deref(), Some("x"));
    }

    #[test]
    fn single_vote_decides() {
        let v = majority_vote(&[None, yes(4, "C"), None], 0).unwrap();
        assert_eq!(v, Verdict::error(4, Some("C".into()), "majority"));
        assert_eq!(majority_vote(&[None, None, None], 0), Err(VoteError::AllAbstained));
        // 1-1 split among two remaining votes is a tie, resolved to no error.
        assert!(!majority_vote(&[None, yes(4, "C"), no()], 0).unwrap().error_flag);
    }

    fn vote_strategy() -> impl Strategy<Value = Option<Verdict>> {
        prop_oneof![
            Just(None),
            Just(Some(Verdict::no_error("s"))),
            (0usize..3, "[a-c]").prop_map(|(id, c)| Some(Verdict::error(id, Some(c), "s"))),
        ]
    }

    proptest! {
        #[test]
        fn vote_order_does_not_matter(
            votes in prop::collection::vec(vote_strategy(), 3),
            seed in any::<u64>(),
        ) {
            let base = majority_vote(&votes, seed);
            for perm in [[1, 0, 2], [2, 1, 0], [0, 2, 1], [1, 2, 0], [2, 0, 1]] {
                let shuffled: Vec<_> = perm.iter().map(|&i| votes[i].clone()).collect();
                prop_assert_eq!(majority_vote(&shuffled, seed), base.clone());
            }
        }

        #[test]
        fn flag_ignores_correction_text(
            votes in prop::collection::vec(vote_strategy(), 3),
            seed in any::<u64>(),
        ) {
            let blanked: Vec<_> = votes
                .iter()
                .map(|v| v.clone().map(|mut v| { if v.error_flag { v.corrected_sentence = Some("z".into()); } v }))
                .collect();
            let a = majority_vote(&votes, seed).map(|v| (v.error_flag, v.error_sentence_id));
            let b = majority_vote(&blanked, seed).map(|v| (v.error_flag, v.error_sentence_id));
            prop_assert_eq!(a, b);
        }
    }

    fn train() -> Dataset {
        let mut d = Dataset::new(DatasetName::MsTrain);
        for i in 0..10 {
            let a = if i % 2 == 0 {
                ErrorAnnotation::no_error()
            } else {
                ErrorAnnotation::error(0, format!("Fixed {i}."))
            };
            d.entries.push(DatasetEntry {
                note: ClinicalNote::from_numbered(format!("t{i}"), format!("0 Train note {i}.")).unwrap(),
                annotation: Some(a),
            });
        }
        d
    }

    fn echo_backend() -> MockBackend {
        MockBackend::from_fn(|r| Some(Ok(format!("reason for {}", r.seed_tag))))
    }

    #[test]
    fn bank_has_one_entry_per_note() {
        let mock = echo_backend();
        let b = build_reason_bank(
            &train(),
            None,
            &TemplateSet::builtin(),
            &mock,
            &GenerationConfig::default(),
            4,
        )
        .unwrap();
        assert_eq!(b.bank.len(), 10);
        assert_eq!((b.generated, b.reused), (10, 0));
        assert!(b.is_complete());
        assert_eq!(b.bank.reason("t3"), Some("reason for t3/REASON_GEN"));
    }

    #[test]
    fn bank_rebuild_regenerates_only_changed_notes() {
        let mock = echo_backend();
        let g = GenerationConfig::default();
        let t = TemplateSet::builtin();
        let first = build_reason_bank(&train(), None, &t, &mock, &g, 1).unwrap();
        let mut changed = train();
        changed.entries[4].note = ClinicalNote::from_numbered("t4", "0 Edited note text.").unwrap();
        let mock2 = echo_backend();
        let second = build_reason_bank(&changed, Some(&first.bank), &t, &mock2, &g, 1).unwrap();
        assert_eq!(mock2.calls(), 1);
        assert_eq!((second.generated, second.reused), (1, 9));
        assert!(second.bank.missing(&changed).is_empty());
    }

    #[test]
    fn incorrect_note_request_carries_its_correction() {
        let mock = echo_backend();
        build_reason_bank(
            &train(),
            None,
            &TemplateSet::builtin(),
            &mock,
            &GenerationConfig::default(),
            1,
        )
        .unwrap();
        let req = mock
            .requests()
            .into_iter()
            .find(|r| r.seed_tag == "t3/REASON_GEN")
            .unwrap();
        assert!(req.user.contains("Fixed 3."));
    }

    #[test]
    fn bank_failures_are_collected() {
        let mock = MockBackend::from_fn(|r| {
            if r.seed_tag.starts_with("t7/") {
                Some(Err(crate::llm::LlmError::BackendUnavailable("x".into())))
            } else {
                Some(Ok("ok".into()))
            }
        });
        let b = build_reason_bank(
            &train(),
            None,
            &TemplateSet::builtin(),
            &mock,
            &GenerationConfig::default(),
            2,
        )
        .unwrap();
        assert!(!b.is_complete());
        assert_eq!(b.failures.len(), 1);
        assert_eq!(b.failures[0].0, "t7");
        assert_eq!(b.bank.len(), 9);
    }

    #[test]
    fn bank_round_trips_through_jsonl() {
        let mock = echo_backend();
        let b = build_reason_bank(
            &train(),
            None,
            &TemplateSet::builtin(),
            &mock,
            &GenerationConfig::default(),
            1,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bank.jsonl");
        b.bank.save(&p, Some(&RunHeader::new("h", 3))).unwrap();
        assert_eq!(ReasonBank::load(&p).unwrap(), b.bank);
    }

    struct SolveFixture {
        index: VectorIndex,
        pool: TrainingPool,
        bank: ReasonBank,
        templates: TemplateSet,
        generation: GenerationConfig,
        cfg: RetrievalConfig,
    }

    impl SolveFixture {
        fn new() -> Self {
            let d = train();
            let entries = (0..10)
                .map(|i| {
                    let t = i as f64 * 0.1;
                    IndexEntry {
                        note_id: format!("t{i}"),
                        embedding: Embedding::new(vec![t.cos(), t.sin()]).unwrap(),
                        error_flag: i % 2 == 1,
                    }
                })
                .collect();
            let bank = build_reason_bank(
                &d,
                None,
                &TemplateSet::builtin(),
                &echo_backend(),
                &GenerationConfig::default(),
                1,
            )
            .unwrap()
            .bank;
            Self {
                index: VectorIndex::build("t", entries).unwrap(),
                pool: TrainingPool::from_dataset(&d).unwrap(),
                bank,
                templates: TemplateSet::builtin(),
                generation: GenerationConfig::default(),
                cfg: RetrievalConfig::default(),
            }
        }

        fn pipeline<'a>(&'a self, backend: &'a MockBackend) -> ReasonPipeline<'a> {
            ReasonPipeline::new(
                PipelineContext {
                    index: &self.index,
                    train: &self.pool,
                    templates: &self.templates,
                    backend,
                    generation: &self.generation,
                },
                &self.bank,
                &self.cfg,
            )
            .unwrap()
        }
    }

    fn target() -> ClinicalNote {
        ClinicalNote::from_numbered("q", "0 A.\n1 B.\n2 C.\n3 D.\n4 E.\n5 F.").unwrap()
    }

    fn query() -> Embedding {
        Embedding::new(vec![1.0, 0.0]).unwrap()
    }

    #[test]
    fn solve_votes_over_three_samples() {
        let fx = SolveFixture::new();
        let mock = MockBackend::from_fn(|r| {
            Some(Ok(match r.seed_tag.as_str() {
                "q/sample_3" => "ERROR: no".to_string(),
                _ => "ERROR: yes\nSENTENCE_ID: 5\nCORRECTED: Fixed F.".to_string(),
            }))
        });
        let (v, set) = fx.pipeline(&mock).solve(&target(), &query(), 11).unwrap();
        assert_eq!(v, Verdict::error(5, Some("Fixed F.".into()), "majority"));
        assert_eq!(set.votes.len(), 3);
        let labels: Vec<_> = set.votes.iter().map(|v| v.provenance.as_str()).collect();
        assert_eq!(labels, ["sample_1", "sample_2", "sample_3"]);
        assert!(mock.requests().iter().all(|r| r.temperature == 0.7));
    }

    #[test]
    fn samples_are_balanced_and_first_is_top_ranked() {
        let fx = SolveFixture::new();
        let mock = MockBackend::fixed("ERROR: no");
        let draws = fx.pipeline(&mock).draw_examples(&query(), 5).unwrap();
        assert_eq!(draws.len(), 3);
        let ids: Vec<_> = draws[0].iter().map(|n| n.note_id.as_str()).collect();
        assert_eq!(ids, ["t0", "t1", "t2", "t3"]);
        for d in &draws {
            assert_eq!(d.len(), 4);
            assert_eq!(d.iter().filter(|n| n.error_flag).count(), 2);
        }
        assert_eq!(draws, fx.pipeline(&mock).draw_examples(&query(), 5).unwrap());
        let distinct = (0..20u64)
            .map(|s| fx.pipeline(&mock).draw_examples(&query(), s).unwrap()[1].clone())
            .collect::<Vec<_>>();
        assert!(distinct.iter().any(|d| d != &draws[0]), "re-draws vary composition");
    }

    #[test]
    fn unparseable_samples_abstain() {
        let fx = SolveFixture::new();
        let mock = MockBackend::from_fn(|r| {
            Some(Ok(if r.seed_tag.starts_with("q/sample_1") {
                "ERROR: yes\nSENTENCE_ID: 2\nCORRECTED: C fixed.".to_string()
            } else {
                "I cannot tell.".to_string()
            }))
        });
        let (v, set) = fx.pipeline(&mock).solve(&target(), &query(), 1).unwrap();
        assert_eq!(v.error_sentence_id, Some(2));
        assert_eq!(set.votes.iter().filter(|v| v.verdict.is_none()).count(), 2);

        let mock = MockBackend::fixed("no idea");
        let (v, _) = fx.pipeline(&mock).solve(&target(), &query(), 1).unwrap();
        assert_eq!(v.provenance, FAILED);
    }

    #[test]
    fn solve_is_deterministic_for_fixed_seed() {
        let fx = SolveFixture::new();
        let answer = |r: &crate::llm::ChatRequest| {
            let h = r.hash();
            Some(Ok(format!(
                "ERROR: yes\nSENTENCE_ID: 1\nCORRECTED: variant {}",
                &h[..4]
            )))
        };
        let a = fx
            .pipeline(&MockBackend::from_fn(answer))
            .solve(&target(), &query(), 77)
            .unwrap();
        let b = fx
            .pipeline(&MockBackend::from_fn(answer))
            .solve(&target(), &query(), 77)
            .unwrap();
        assert_eq!(a, b);
    }
}
