//! Retrieval-augmented prompt pipelines for detecting, locating and
//! correcting medical errors in clinical notes.

pub mod artifact;
pub mod context;
pub mod corpus;
pub mod cot;
pub mod digest;
pub mod ensemble;
pub mod eval;
pub mod http;
pub mod llm;
pub mod prompt;
pub mod reason;
pub mod retrieval;

pub use artifact::{Prediction, RunHeader};
pub use context::{PipelineContext, PipelineError, QueryEmbeddings, TrainingPool};
pub use corpus::{ClinicalNote, Dataset, DatasetEntry, DatasetName, ErrorAnnotation, Sentence};
pub use cot::{CascadeConfig, CotPipeline};
pub use ensemble::{merge, MergeDecision, MergeRule};
pub use eval::{build_report, EvaluationReport, Metric};
pub use llm::{Backend, ChatRequest, ChatResponse, GenerationConfig};
pub use prompt::{TemplateName, TemplateSet, Verdict};
pub use reason::{majority_vote, ReasonBank, ReasonPipeline};
pub use retrieval::{Embedding, RetrievalConfig, VectorIndex};
