//! Chat-completion gateway: one [`Backend`] trait over a live
//! OpenAI-compatible endpoint, a scripted mock, and record/replay sessions.

mod live;
mod mock;
mod session;

#[cfg(test)]
pub(crate) use live::test_server;
pub use live::{LiveBackend, LiveConfig, API_KEY_ENV};
pub use mock::{MockBackend, MockRule, MockScript};
pub use session::{record_replay, RecordingBackend, ReplayBackend, SessionMode, SessionRecord};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::sha256_hex;
use crate::http::HttpError;
use crate::prompt::{PromptError, REMINDER};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("context too long: {0}")]
    ContextTooLong(String),
    #[error("authentication failed: {0}")]
    AuthFailure(String),
    #[error("replay miss for request {0}")]
    ReplayMiss(String),
    #[error("session file error: {0}")]
    Session(String),
    #[error("mock script has no response for request {0}")]
    NoScriptedResponse(String),
}

impl From<HttpError> for LlmError {
    fn from(e: HttpError) -> Self {
        match e {
            HttpError::Auth(_) => LlmError::AuthFailure(e.to_string()),
            HttpError::ContextTooLong(m) => LlmError::ContextTooLong(m),
            other => LlmError::BackendUnavailable(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: String,
    pub user: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub model_id: String,
    /// Logical key distinguishing otherwise identical sampled requests.
    pub seed_tag: String,
}

impl ChatRequest {
    /// SHA-256 over the canonical JSON serialization (fixed field order).
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("request serializes"))
    }

    /// The same request with the format reminder appended.
    pub fn with_reminder(&self) -> Self {
        Self {
            user: format!("{}{}", self.user, REMINDER),
            seed_tag: format!("{}/reminder", self.seed_tag),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub backend_id: String,
    pub latency_ms: u64,
    pub from_cache: bool,
}

pub trait Backend: Send + Sync {
    fn id(&self) -> &str;

    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError>;
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        (**self).complete(req)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        (**self).complete(req)
    }
}

/// Decoding parameters shared by the pipelines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub model_id: String,
    pub max_tokens: u32,
    /// Detection cascade, correction, reason-bank and ensemble prompts.
    pub deterministic_temperature: f64,
    /// The reason method's three sampled answers.
    pub sampling_temperature: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            model_id: "gpt-4".into(),
            max_tokens: 512,
            deterministic_temperature: 0.0,
            sampling_temperature: 0.7,
        }
    }
}

impl GenerationConfig {
    pub fn request(&self, system: &str, user: String, temperature: f64, seed_tag: String) -> ChatRequest {
        ChatRequest {
            system: system.to_string(),
            user,
            temperature,
            max_tokens: self.max_tokens,
            model_id: self.model_id.clone(),
            seed_tag,
        }
    }
}

/// Outcome of [`ask`]: the parsed value plus bookkeeping for traces.
#[derive(Debug, Clone, PartialEq)]
pub struct Asked<T> {
    pub value: T,
    pub prompt_hash: String,
    pub reminded: bool,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AskError {
    #[error(transparent)]
    Backend(#[from] LlmError),
    #[error(transparent)]
    Unparseable(PromptError),
}

/// Sends `req`; if the answer does not parse, retries once with the format reminder.
pub fn ask<T>(
    backend: &dyn Backend,
    req: &ChatRequest,
    parse: impl Fn(&str) -> Result<T, PromptError>,
) -> Result<Asked<T>, AskError> {
    let prompt_hash = req.hash();
    let first = backend.complete(req)?;
    match parse(&first.text) {
        Ok(value) => Ok(Asked {
            value,
            prompt_hash,
            reminded: false,
        }),
        Err(err) => {
            log::debug!("request {prompt_hash} unparseable ({err}); retrying with reminder");
            let retry = backend.complete(&req.with_reminder())?;
            parse(&retry.text)
                .map(|value| Asked {
                    value,
                    prompt_hash,
                    reminded: true,
                })
                .map_err(AskError::Unparseable)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::parse_verdict;

    fn req() -> ChatRequest {
        GenerationConfig::default().request("sys", "user".into(), 0.0, "n1/STANDARD_DETECT".into())
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let r = req();
        assert_eq!(r.hash(), req().hash());
        assert_eq!(r.hash().len(), 64);
        let mut t = req();
        t.temperature = 0.7;
        assert_ne!(t.hash(), r.hash());
        let mut s = req();
        s.seed_tag = "other".into();
        assert_ne!(s.hash(), r.hash());
        assert_ne!(r.with_reminder().hash(), r.hash());
    }

    #[test]
    fn ask_retries_once_with_reminder() {
        let mock = MockBackend::from_sequence(["I think it is fine.", "ERROR: no"]);
        let got = ask(&mock, &req(), parse_verdict).unwrap();
        assert!(got.reminded);
        assert!(!got.value.error_flag);
        assert_eq!(mock.calls(), 2);
        assert!(mock.requests()[1].user.ends_with(REMINDER));

        let mock = MockBackend::from_sequence(["nope", "still nope"]);
        assert!(matches!(
            ask(&mock, &req(), parse_verdict),
            Err(AskError::Unparseable(_))
        ));
        assert_eq!(mock.calls(), 2);
    }
}
