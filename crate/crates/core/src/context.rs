//! State shared by the three methods: the retrieval index over the training
//! split, the training notes themselves, templates, and the chat backend.

use std::collections::HashMap;

use thiserror::Error;

use crate::corpus::{ClinicalNote, Dataset, ErrorAnnotation};
use crate::llm::{AskError, Backend, GenerationConfig};
use crate::prompt::{IclExample, PromptError, TemplateSet};
use crate::retrieval::{Embedding, Neighbor, RetrievalError, VectorIndex};

/// Provenance label of a note whose pipeline run failed.
pub const FAILED: &str = "FAILED";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Ask(#[from] AskError),
    #[error("no query embedding for note {0:?}")]
    MissingQuery(String),
    #[error("retrieved note {0:?} is not in the training pool")]
    UnknownExample(String),
    #[error("no reason for training note {0:?}")]
    MissingReason(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// Annotated training notes addressable by id.
#[derive(Debug, Clone, Default)]
pub struct TrainingPool {
    by_id: HashMap<String, (ClinicalNote, ErrorAnnotation)>,
}

impl TrainingPool {
    /// Every note must carry an annotation.
    pub fn from_dataset(train: &Dataset) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(train.len());
        for e in &train.entries {
            let a = e.annotation.clone().ok_or_else(|| {
                PipelineError::Precondition(format!("training note {} has no annotation", e.note.note_id))
            })?;
            by_id.insert(e.note.note_id.clone(), (e.note.clone(), a));
        }
        Ok(Self { by_id })
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    pub fn get(&self, note_id: &str) -> Option<&(ClinicalNote, ErrorAnnotation)> {
        self.by_id.get(note_id)
    }

    pub fn example(&self, note_id: &str, reason: Option<String>) -> Result<IclExample> {
        let (note, annotation) = self
            .get(note_id)
            .ok_or_else(|| PipelineError::UnknownExample(note_id.to_string()))?;
        Ok(IclExample {
            note: note.clone(),
            annotation: annotation.clone(),
            reason,
        })
    }

    pub fn examples(&self, neighbors: &[Neighbor]) -> Result<Vec<IclExample>> {
        neighbors.iter().map(|n| self.example(&n.note_id, None)).collect()
    }
}

/// Query embeddings for the notes being processed, keyed by note id.
pub type QueryEmbeddings = HashMap<String, Embedding>;

#[derive(Clone, Copy)]
pub struct PipelineContext<'a> {
    pub index: &'a VectorIndex,
    pub train: &'a TrainingPool,
    pub templates: &'a TemplateSet,
    pub backend: &'a dyn Backend,
    pub generation: &'a GenerationConfig,
}

impl<'a> PipelineContext<'a> {
    pub fn query<'q>(&self, queries: &'q QueryEmbeddings, note_id: &str) -> Result<&'q Embedding> {
        queries
            .get(note_id)
            .ok_or_else(|| PipelineError::MissingQuery(note_id.to_string()))
    }
}

/// Maps `f` over `items` on at most `jobs` threads, preserving input order.
pub fn parallel_map<T, R, F>(jobs: usize, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    if jobs <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        Err(e) => {
            log::warn!("thread pool unavailable ({e}); running sequentially");
            items.iter().map(f).collect()
        }
    }
}
