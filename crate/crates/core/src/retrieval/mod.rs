//! Exhaustive cosine-similarity index over note embeddings, k-NN queries,
//! and class-balanced example selection for in-context prompts.

mod embed;
mod store;

pub use embed::{embed_batch, CachedEmbedder, EmbedOptions, EmbeddingBackend, HashingEmbedder, HttpEmbedder};
pub use store::{load_index, save_index};

use std::cmp::Ordering;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetrievalError {
    #[error("empty input")]
    EmptyInput,
    #[error("embedding backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("embedding contains non-finite values")]
    NonFinite,
    #[error("index is empty")]
    EmptyIndex,
    #[error("duplicate note id {0:?} in index")]
    DuplicateNoteId(String),
    #[error("index has {available} {class} notes, {needed} needed")]
    ClassUnavailable {
        class: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("invalid retrieval config: {0}")]
    InvalidConfig(String),
    #[error("index file integrity check failed: {0}")]
    Integrity(String),
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T, E = RetrievalError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Rejects empty or non-finite vectors.
    pub fn new(vector: Vec<f64>) -> Result<Self> {
        if vector.is_empty() {
            return Err(RetrievalError::EmptyInput);
        }
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(RetrievalError::NonFinite);
        }
        Ok(Self(vector))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// `dot(a, b) / (|a| |b|)`, clamped to [-1, 1].
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(RetrievalError::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(RetrievalError::ZeroVector);
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub note_id: String,
    pub embedding: Embedding,
    /// `true` when the indexed training note contains an error.
    pub error_flag: bool,
}

/// Immutable flat store; every query is a full scan.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    entries: Vec<IndexEntry>,
    norms: Vec<f64>,
    dim: usize,
    backend_id: String,
}

impl VectorIndex {
    pub fn build(backend_id: impl Into<String>, entries: Vec<IndexEntry>) -> Result<Self> {
        let dim = entries.first().map(|e| e.embedding.dim()).unwrap_or(0);
        let mut seen = HashSet::new();
        let mut norms = Vec::with_capacity(entries.len());
        for e in &entries {
            if e.embedding.dim() != dim {
                return Err(RetrievalError::DimensionMismatch {
                    expected: dim,
                    found: e.embedding.dim(),
                });
            }
            if !seen.insert(e.note_id.as_str()) {
                return Err(RetrievalError::DuplicateNoteId(e.note_id.clone()));
            }
            let n = e.embedding.norm();
            if n == 0.0 {
                return Err(RetrievalError::ZeroVector);
            }
            norms.push(n);
        }
        Ok(Self {
            entries,
            norms,
            dim,
            backend_id: backend_id.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn backend_id(&self) -> &str {
        &self.backend_id
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn class_counts(&self) -> (usize, usize) {
        let incorrect = self.entries.iter().filter(|e| e.error_flag).count();
        (self.entries.len() - incorrect, incorrect)
    }

    /// Every entry scored against `query`, best first, ties by ascending note id.
    pub fn rank_all(&self, query: &Embedding) -> Result<Vec<Neighbor>> {
        if self.entries.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        if query.dim() != self.dim {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.dim,
                found: query.dim(),
            });
        }
        let qn = query.norm();
        if qn == 0.0 {
            return Err(RetrievalError::ZeroVector);
        }
        let mut ranked: Vec<Neighbor> = self
            .entries
            .iter()
            .zip(&self.norms)
            .map(|(e, n)| {
                let dot: f64 = e
                    .embedding
                    .as_slice()
                    .iter()
                    .zip(query.as_slice())
                    .map(|(x, y)| x * y)
                    .sum();
                Neighbor {
                    note_id: e.note_id.clone(),
                    similarity: (dot / (n * qn)).clamp(-1.0, 1.0),
                    error_flag: e.error_flag,
                }
            })
            .collect();
        ranked.sort_by(rank_order);
        Ok(ranked)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub note_id: String,
    pub similarity: f64,
    pub error_flag: bool,
}

fn rank_order(a: &Neighbor, b: &Neighbor) -> Ordering {
    b.similarity
        .total_cmp(&a.similarity)
        .then_with(|| a.note_id.cmp(&b.note_id))
}

/// Top-`k` neighbours by descending cosine; length is `min(k, |index|)`.
pub fn knn(index: &VectorIndex, query: &Embedding, k: usize) -> Result<Vec<Neighbor>> {
    if k == 0 {
        return Err(RetrievalError::InvalidConfig("k must be >= 1".into()));
    }
    let mut ranked = index.rank_all(query)?;
    ranked.truncate(k);
    Ok(ranked)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    /// In-context examples per prompt.
    pub k_shot: usize,
    /// Candidate pool size before class balancing.
    pub pool_k: usize,
    pub n_correct: usize,
    pub n_incorrect: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k_shot: 4,
            pool_k: 20,
            n_correct: 2,
            n_incorrect: 2,
        }
    }
}

impl RetrievalConfig {
    /// `shots` examples split ceil/floor between correct and incorrect notes.
    pub fn for_shots(shots: usize, pool_k: usize) -> Result<Self> {
        let cfg = Self {
            k_shot: shots,
            pool_k: pool_k.max(shots),
            n_correct: shots.div_ceil(2),
            n_incorrect: shots / 2,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_shot == 0 {
            return Err(RetrievalError::InvalidConfig("k_shot must be >= 1".into()));
        }
        if self.n_correct + self.n_incorrect != self.k_shot {
            return Err(RetrievalError::InvalidConfig(format!(
                "n_correct ({}) + n_incorrect ({}) != k_shot ({})",
                self.n_correct, self.n_incorrect, self.k_shot
            )));
        }
        if self.pool_k < self.k_shot {
            return Err(RetrievalError::InvalidConfig(format!(
                "pool_k ({}) < k_shot ({})",
                self.pool_k, self.k_shot
            )));
        }
        Ok(())
    }
}

/// Nearest neighbours split by class, drawn from a pool that was widened
/// (doubling `pool_k`) until each class has enough members.
#[derive(Debug, Clone, PartialEq)]
pub struct BalancedPool {
    pub correct: Vec<Neighbor>,
    pub incorrect: Vec<Neighbor>,
    /// Final pool size after widening.
    pub pool_size: usize,
}

pub fn balanced_pool(index: &VectorIndex, query: &Embedding, cfg: &RetrievalConfig) -> Result<BalancedPool> {
    cfg.validate()?;
    let (n_ok, n_err) = index.class_counts();
    if n_ok < cfg.n_correct {
        return Err(RetrievalError::ClassUnavailable {
            class: "correct",
            needed: cfg.n_correct,
            available: n_ok,
        });
    }
    if n_err < cfg.n_incorrect {
        return Err(RetrievalError::ClassUnavailable {
            class: "incorrect",
            needed: cfg.n_incorrect,
            available: n_err,
        });
    }
    let ranked = index.rank_all(query)?;
    let mut pool_size = cfg.pool_k.min(ranked.len());
    loop {
        let pool = &ranked[..pool_size];
        let (incorrect, correct): (Vec<_>, Vec<_>) = pool.iter().cloned().partition(|n| n.error_flag);
        let satisfied = correct.len() >= cfg.n_correct && incorrect.len() >= cfg.n_incorrect;
        if satisfied || pool_size == ranked.len() {
            return Ok(BalancedPool {
                correct,
                incorrect,
                pool_size,
            });
        }
        pool_size = (pool_size * 2).min(ranked.len());
    }
}

/// The `n_correct` most similar correct notes and `n_incorrect` most similar
/// incorrect notes, merged in descending-similarity order.
pub fn balanced_sample(index: &VectorIndex, query: &Embedding, cfg: &RetrievalConfig) -> Result<Vec<Neighbor>> {
    let pool = balanced_pool(index, query, cfg)?;
    let mut picked: Vec<Neighbor> = pool.correct[..cfg.n_correct]
        .iter()
        .chain(&pool.incorrect[..cfg.n_incorrect])
        .cloned()
        .collect();
    picked.sort_by(rank_order);
    Ok(picked)
}

/// Sorts neighbours into retrieval rank order.
pub fn sort_ranked(neighbors: &mut [Neighbor]) {
    neighbors.sort_by(rank_order);
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn emb(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    fn entry(id: &str, v: &[f64], flag: bool) -> IndexEntry {
        IndexEntry {
            note_id: id.into(),
            embedding: emb(v),
            error_flag: flag,
        }
    }

    #[test]
    fn cosine_identity_and_orthogonality() {
        let v = emb(&[0.3, -1.2, 4.0]);
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&emb(&[1.0, 0.0]), &emb(&[0.0, 1.0])).unwrap(), 0.0);
    }

    #[test]
    fn cosine_hand_computed() {
        // dot = 2 + 2 + 4 = 8, norms are both 3.
        let c = cosine(&emb(&[1.0, 2.0, 2.0]), &emb(&[2.0, 1.0, 2.0])).unwrap();
        assert!((c - 8.0 / 9.0).abs() < 1e-15);
        assert!((c - 0.888889).abs() < 1e-6);
    }

    #[test]
    fn cosine_errors() {
        assert_eq!(
            cosine(&emb(&[0.0, 0.0]), &emb(&[1.0, 0.0])),
            Err(RetrievalError::ZeroVector)
        );
        assert!(matches!(
            cosine(&emb(&[1.0]), &emb(&[1.0, 0.0])),
            Err(RetrievalError::DimensionMismatch { .. })
        ));
        assert_eq!(Embedding::new(vec![f64::NAN]), Err(RetrievalError::NonFinite));
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_scale_invariant(
            a in prop::collection::vec(-10.0f64..10.0, 8),
            b in prop::collection::vec(-10.0f64..10.0, 8),
            alpha in 0.001f64..1000.0,
        ) {
            let (ea, eb) = (emb(&a), emb(&b));
            prop_assume!(ea.norm() > 1e-6 && eb.norm() > 1e-6);
            let ab = cosine(&ea, &eb).unwrap();
            let ba = cosine(&eb, &ea).unwrap();
            prop_assert_eq!(ab, ba);
            let scaled = emb(&a.iter().map(|x| x * alpha).collect::<Vec<_>>());
            prop_assert!((cosine(&scaled, &eb).unwrap() - ab).abs() <= 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }
    }

    #[test]
    fn knn_saturates_at_index_size() {
        let idx = VectorIndex::build("t", vec![entry("a", &[1.0, 0.0], false), entry("b", &[0.0, 1.0], true)]).unwrap();
        let r = knn(&idx, &emb(&[1.0, 0.1]), 10).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r[0].note_id, "a");
    }

    #[test]
    fn knn_exact_match_ranks_first() {
        let idx = VectorIndex::build(
            "t",
            vec![
                entry("a", &[1.0, 2.0, 3.0], false),
                entry("b", &[3.0, 2.0, 1.0], true),
                entry("c", &[-1.0, 0.0, 1.0], true),
            ],
        )
        .unwrap();
        let r = knn(&idx, &emb(&[3.0, 2.0, 1.0]), 1).unwrap();
        assert_eq!(r[0].note_id, "b");
        assert!((r[0].similarity - 1.0).abs() < 1e-15);
    }

    #[test]
    fn knn_ties_break_by_note_id() {
        let idx = VectorIndex::build(
            "t",
            vec![
                entry("z", &[1.0, 0.0], false),
                entry("m", &[2.0, 0.0], false),
                entry("a", &[3.0, 0.0], false),
            ],
        )
        .unwrap();
        let ids: Vec<_> = knn(&idx, &emb(&[1.0, 0.0]), 3)
            .unwrap()
            .into_iter()
            .map(|n| n.note_id)
            .collect();
        assert_eq!(ids, ["a", "m", "z"]);
    }

    #[test]
    fn empty_index_errors() {
        let idx = VectorIndex::build("t", vec![]).unwrap();
        assert_eq!(knn(&idx, &emb(&[1.0]), 1), Err(RetrievalError::EmptyIndex));
    }

    #[test]
    fn index_rejects_duplicates_and_mixed_dims() {
        assert!(matches!(
            VectorIndex::build("t", vec![entry("a", &[1.0], false), entry("a", &[2.0], false)]),
            Err(RetrievalError::DuplicateNoteId(_))
        ));
        assert!(matches!(
            VectorIndex::build("t", vec![entry("a", &[1.0], false), entry("b", &[1.0, 2.0], false)]),
            Err(RetrievalError::DimensionMismatch { .. })
        ));
    }

    /// Brute-force oracle: score every entry independently, then pick the top
    /// k by repeated selection of the max (no sort involved).
    fn scan_oracle(entries: &[(String, Vec<f64>)], q: &[f64], k: usize) -> Vec<String> {
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut scored: Vec<(String, f64)> = entries
            .iter()
            .map(|(id, v)| {
                let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                (id.clone(), d / (norm(v) * norm(q)))
            })
            .collect();
        let mut out = Vec::new();
        while out.len() < k && !scored.is_empty() {
            let mut best = 0;
            for i in 1..scored.len() {
                let (ref id, s) = scored[i];
                let (ref bid, bs) = scored[best];
                if s > bs || (s == bs && id < bid) {
                    best = i;
                }
            }
            out.push(scored.swap_remove(best).0);
        }
        out
    }

    #[test]
    fn knn_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let raw: Vec<(String, Vec<f64>)> = (0..300)
            .map(|i| (format!("n{i:04}"), (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect();
        let idx = VectorIndex::build("t", raw.iter().map(|(id, v)| entry(id, v, false)).collect()).unwrap();
        for _ in 0..10 {
            let q: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for k in [1, 4, 10, 50] {
                let got: Vec<_> = knn(&idx, &emb(&q), k).unwrap().into_iter().map(|n| n.note_id).collect();
                assert_eq!(got, scan_oracle(&raw, &q, k));
            }
        }
    }

    /// Eight notes on the unit circle at increasing angle from the query.
    fn ring(flags: &[bool]) -> VectorIndex {
        let entries = flags
            .iter()
            .enumerate()
            .map(|(i, &f)| {
                let t = i as f64 * 0.1;
                entry(&format!("n{i}"), &[t.cos(), t.sin()], f)
            })
            .collect();
        VectorIndex::build("t", entries).unwrap()
    }

    fn ids(v: &[Neighbor]) -> Vec<&str> {
        v.iter().map(|n| n.note_id.as_str()).collect()
    }

    #[test]
    fn balanced_sample_picks_top_two_of_each_class() {
        // ranks: n0..n7; correct at n1, n4, n6; incorrect at n0, n2, n3, n5, n7.
        let idx = ring(&[true, false, true, true, false, true, false, true]);
        let cfg = RetrievalConfig {
            pool_k: 8,
            ..Default::default()
        };
        let got = balanced_sample(&idx, &emb(&[1.0, 0.0]), &cfg).unwrap();
        assert_eq!(ids(&got), ["n0", "n1", "n2", "n4"]);
    }

    #[test]
    fn balanced_sample_widens_pool() {
        // First four neighbours are all incorrect; correct ones sit at n5, n6.
        let idx = ring(&[true, true, true, true, true, false, false, true]);
        let cfg = RetrievalConfig {
            pool_k: 4,
            ..Default::default()
        };
        let pool = balanced_pool(&idx, &emb(&[1.0, 0.0]), &cfg).unwrap();
        assert_eq!(pool.pool_size, 8);
        let got = balanced_sample(&idx, &emb(&[1.0, 0.0]), &cfg).unwrap();
        assert_eq!(ids(&got), ["n0", "n1", "n5", "n6"]);
    }

    #[test]
    fn balanced_sample_needs_both_classes() {
        let idx = ring(&[true, true, true, true]);
        let err = balanced_sample(&idx, &emb(&[1.0, 0.0]), &RetrievalConfig::default()).unwrap_err();
        assert!(matches!(
            err,
            RetrievalError::ClassUnavailable {
                class: "correct",
                available: 0,
                ..
            }
        ));
    }

    #[test]
    fn shot_splits_round_correct_up() {
        let split = |s| {
            let c = RetrievalConfig::for_shots(s, 20).unwrap();
            (c.n_correct, c.n_incorrect)
        };
        assert_eq!(split(2), (1, 1));
        assert_eq!(split(3), (2, 1));
        assert_eq!(split(4), (2, 2));
        assert_eq!(split(5), (3, 2));
        assert!(RetrievalConfig::for_shots(0, 20).is_err());
    }

    proptest! {
        #[test]
        fn balanced_sample_has_requested_composition(
            flags in prop::collection::vec(any::<bool>(), 4..40),
            n_correct in 0usize..3,
            n_incorrect in 0usize..3,
            pool_k in 1usize..10,
        ) {
            prop_assume!(n_correct + n_incorrect > 0);
            let idx = ring(&flags);
            let k = n_correct + n_incorrect;
            let cfg = RetrievalConfig { k_shot: k, pool_k: pool_k.max(k), n_correct, n_incorrect };
            match balanced_sample(&idx, &emb(&[1.0, 0.0]), &cfg) {
                Ok(got) => {
                    prop_assert_eq!(got.len(), k);
                    prop_assert_eq!(got.iter().filter(|n| n.error_flag).count(), n_incorrect);
                    prop_assert!(got.windows(2).all(|w| w[0].similarity >= w[1].similarity));
                }
                Err(RetrievalError::ClassUnavailable { .. }) => {
                    let (ok, bad) = idx.class_counts();
                    prop_assert!(ok < n_correct || bad < n_incorrect);
                }
                Err(e) => prop_assert!(false, "unexpected {e}"),
            }
        }
    }
}
