use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{Backend, ChatRequest, ChatResponse, LlmError};
use crate::http::{JsonClient, RetryPolicy};

/// Environment variable holding the API key for the live backend.
pub const API_KEY_ENV: &str = "MEDCORR_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LiveConfig {
    pub base_url: String,
    pub retry: RetryPolicy,
    pub requests_per_minute: Option<u32>,
    pub timeout_secs: u64,
}

impl Default for LiveConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            retry: RetryPolicy::default(),
            requests_per_minute: Some(60),
            timeout_secs: 120,
        }
    }
}

/// OpenAI-compatible `POST {base_url}/chat/completions`.
#[derive(Debug)]
pub struct LiveBackend {
    id: String,
    client: JsonClient,
}

#[derive(Serialize)]
struct Message<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct CompletionBody<'a> {
    model: &'a str,
    messages: Vec<Message<'a>>,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct CompletionReply {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ReplyMessage,
}

#[derive(Deserialize)]
struct ReplyMessage {
    #[serde(default)]
    content: Option<String>,
}

impl LiveBackend {
    /// Reads the API key from `MEDCORR_API_KEY` when set.
    pub fn from_env(cfg: &LiveConfig) -> Result<Self, LlmError> {
        Self::new(cfg, std::env::var(API_KEY_ENV).ok())
    }

    pub fn new(cfg: &LiveConfig, api_key: Option<String>) -> Result<Self, LlmError> {
        let client = JsonClient::new(
            cfg.base_url.clone(),
            api_key,
            cfg.retry,
            cfg.requests_per_minute,
            Duration::from_secs(cfg.timeout_secs),
        )?;
        Ok(Self {
            id: format!("live:{}", client.base_url()),
            client,
        })
    }
}

impl Backend for LiveBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let mut messages = Vec::with_capacity(2);
        if !req.system.is_empty() {
            messages.push(Message {
                role: "system",
                content: &req.system,
            });
        }
        messages.push(Message {
            role: "user",
            content: &req.user,
        });
        let body = CompletionBody {
            model: &req.model_id,
            messages,
            temperature: req.temperature,
            max_tokens: req.max_tokens,
        };
        let start = Instant::now();
        let reply: CompletionReply = self.client.post("/chat/completions", &body)?;
        let text = reply
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| LlmError::BackendUnavailable("reply has no message content".into()))?;
        Ok(ChatResponse {
            text,
            backend_id: self.id.clone(),
            latency_ms: start.elapsed().as_millis() as u64,
            from_cache: false,
        })
    }
}
