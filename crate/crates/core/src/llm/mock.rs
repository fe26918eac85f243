use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{Backend, ChatRequest, ChatResponse, LlmError};

/// One scripted rule. Every present condition must hold for the rule to fire.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockRule {
    /// Substrings that must all occur in the user message.
    pub all: Vec<String>,
    /// Substring that must occur in the target section of the user message
    /// (the text after the last `target_marker`).
    pub target: Option<String>,
    /// Substring that must occur in the request's seed tag.
    pub tag: Option<String>,
    pub respond: Option<String>,
    /// Simulates a backend outage with this message.
    pub fail: Option<String>,
}

/// Declarative script for [`MockBackend`], loadable from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockScript {
    pub default: Option<String>,
    pub target_marker: String,
    /// Exact responses keyed by request hash; checked first.
    pub by_hash: BTreeMap<String, String>,
    pub rules: Vec<MockRule>,
}

impl Default for MockScript {
    fn default() -> Self {
        Self {
            default: None,
            target_marker: "Clinical note to ".into(),
            by_hash: BTreeMap::new(),
            rules: Vec::new(),
        }
    }
}

impl MockScript {
    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path).map_err(|e| LlmError::Session(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| LlmError::Session(format!("{}: {e}", path.display())))
    }

    fn target<'a>(&self, user: &'a str) -> &'a str {
        match user.rfind(&self.target_marker) {
            Some(pos) if !self.target_marker.is_empty() => &user[pos..],
            _ => user,
        }
    }

    fn resolve(&self, req: &ChatRequest) -> Option<Result<String, LlmError>> {
        if let Some(r) = self.by_hash.get(&req.hash()) {
            return Some(Ok(r.clone()));
        }
        let target = self.target(&req.user);
        for rule in &self.rules {
            let hit = rule.all.iter().all(|s| req.user.contains(s.as_str()))
                && rule.target.as_deref().is_none_or(|t| target.contains(t))
                && rule.tag.as_deref().is_none_or(|t| req.seed_tag.contains(t));
            if hit {
                if let Some(msg) = &rule.fail {
                    return Some(Err(LlmError::BackendUnavailable(msg.clone())));
                }
                if let Some(r) = &rule.respond {
                    return Some(Ok(r.clone()));
                }
            }
        }
        self.default.clone().map(Ok)
    }
}

type Responder = dyn Fn(&ChatRequest) -> Option<Result<String, LlmError>> + Send + Sync;

/// Deterministic in-process backend. It holds no HTTP client and never
/// touches the network.
///
/// Resolution order: the closure responder, then the queued sequence, then
/// the script (hash, rules, default).
pub struct MockBackend {
    id: String,
    script: MockScript,
    sequence: Mutex<VecDeque<String>>,
    responder: Option<Box<Responder>>,
    log: Mutex<Vec<ChatRequest>>,
}

impl std::fmt::Debug for MockBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MockBackend")
            .field("id", &self.id)
            .field("rules", &self.script.rules.len())
            .finish()
    }
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        Self {
            id: "mock".into(),
            script,
            sequence: Mutex::new(VecDeque::new()),
            responder: None,
            log: Mutex::new(Vec::new()),
        }
    }

    /// Always answers `text`.
    pub fn fixed(text: impl Into<String>) -> Self {
        Self::new(MockScript {
            default: Some(text.into()),
            ..Default::default()
        })
    }

    /// Answers each call with the next queued response, in order.
    pub fn from_sequence<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let m = Self::new(MockScript::default());
        m.sequence
            .lock()
            .expect("mock poisoned")
            .extend(responses.into_iter().map(Into::into));
        m
    }

    /// Answers via `f`; `None` falls through to the script.
    pub fn from_fn<F>(f: F) -> Self
    where
        F: Fn(&ChatRequest) -> Option<Result<String, LlmError>> + Send + Sync + 'static,
    {
        let mut m = Self::new(MockScript::default());
        m.responder = Some(Box::new(f));
        m
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn calls(&self) -> usize {
        self.log.lock().expect("mock poisoned").len()
    }

    /// Every request received so far, in arrival order.
    pub fn requests(&self) -> Vec<ChatRequest> {
        self.log.lock().expect("mock poisoned").clone()
    }
}

impl Backend for MockBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        self.log.lock().expect("mock poisoned").push(req.clone());
        let answer = self
            .responder
            .as_ref()
            .and_then(|f| f(req))
            .or_else(|| self.sequence.lock().expect("mock poisoned").pop_front().map(Ok))
            .or_else(|| self.script.resolve(req))
            .unwrap_or_else(|| Err(LlmError::NoScriptedResponse(req.hash())))?;
        Ok(ChatResponse {
            text: answer,
            backend_id: self.id.clone(),
            latency_ms: 0,
            from_cache: false,
        })
    }
}
