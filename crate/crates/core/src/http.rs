//! Blocking JSON-over-HTTP helper shared by the chat and embedding backends:
//! exponential backoff on transient failures plus a requests-per-minute limiter.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

static LIVE_REQUESTS: AtomicU64 = AtomicU64::new(0);

/// Number of HTTP requests issued by this process so far.
///
/// Test guards read this before and after running mock or replay backends.
pub fn live_request_count() -> u64 {
    LIVE_REQUESTS.load(Ordering::SeqCst)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HttpError {
    #[error("backend unavailable after {attempts} attempt(s): {last}")]
    Unavailable { attempts: u32, last: String },
    #[error("authentication failed (HTTP {0})")]
    Auth(u16),
    #[error("context too long: {0}")]
    ContextTooLong(String),
    #[error("request rejected (HTTP {status}): {body}")]
    Rejected { status: u16, body: String },
    #[error("invalid response body: {0}")]
    Decode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Delay before the first retry, in milliseconds.
    pub base_delay_ms: u64,
    pub factor: u32,
    /// Total attempts including the first one.
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            base_delay_ms: 1000,
            factor: 2,
            max_attempts: 5,
        }
    }
}

impl RetryPolicy {
    /// Delay slept before retry number `retry` (0-based).
    pub fn delay(&self, retry: u32) -> Duration {
        let mult = (self.factor as u64).saturating_pow(retry);
        Duration::from_millis(self.base_delay_ms.saturating_mul(mult))
    }
}

/// Spaces requests so that at most `per_minute` start in any minute.
#[derive(Debug)]
pub struct RateLimiter {
    interval: Option<Duration>,
    next_slot: Mutex<Option<Instant>>,
}

impl RateLimiter {
    pub fn new(per_minute: Option<u32>) -> Self {
        let interval = per_minute
            .filter(|&n| n > 0)
            .map(|n| Duration::from_secs_f64(60.0 / n as f64));
        Self {
            interval,
            next_slot: Mutex::new(None),
        }
    }

    pub fn acquire(&self) {
        let Some(interval) = self.interval else {
            return;
        };
        let wait = {
            let mut slot = self.next_slot.lock().expect("rate limiter poisoned");
            let now = Instant::now();
            let start = match *slot {
                Some(t) if t > now => t,
                _ => now,
            };
            *slot = Some(start + interval);
            start.saturating_duration_since(now)
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}

#[derive(Debug)]
pub struct JsonClient {
    client: reqwest::blocking::Client,
    base_url: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    limiter: RateLimiter,
}

impl JsonClient {
    pub fn new(
        base_url: impl Into<String>,
        api_key: Option<String>,
        retry: RetryPolicy,
        per_minute: Option<u32>,
        timeout: Duration,
    ) -> Result<Self, HttpError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| HttpError::Unavailable {
                attempts: 0,
                last: e.to_string(),
            })?;
        Ok(Self {
            client,
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
            retry,
            limiter: RateLimiter::new(per_minute),
        })
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    /// POSTs `body` to `{base_url}{path}`, retrying 429, 5xx and transport errors.
    pub fn post<B: Serialize, R: for<'de> Deserialize<'de>>(&self, path: &str, body: &B) -> Result<R, HttpError> {
        let url = format!("{}{}", self.base_url, path);
        let max = self.retry.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 0..max {
            if attempt > 0 {
                std::thread::sleep(self.retry.delay(attempt - 1));
            }
            self.limiter.acquire();
            LIVE_REQUESTS.fetch_add(1, Ordering::SeqCst);
            let mut req = self.client.post(&url).json(body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            let resp = match req.send() {
                Ok(r) => r,
                Err(e) => {
                    log::warn!("POST {url} attempt {} failed: {e}", attempt + 1);
                    last = e.to_string();
                    continue;
                }
            };
            let status = resp.status().as_u16();
            if resp.status().is_success() {
                return resp.json::<R>().map_err(|e| HttpError::Decode(e.to_string()));
            }
            let text = resp.text().unwrap_or_default();
            match status {
                401 | 403 => return Err(HttpError::Auth(status)),
                429 | 500..=599 => {
                    log::warn!("POST {url} attempt {} got HTTP {status}", attempt + 1);
                    last = format!("HTTP {status}: {text}");
                }
                _ if text.contains("context_length_exceeded") || text.contains("maximum context length") => {
                    return Err(HttpError::ContextTooLong(text))
                }
                _ => return Err(HttpError::Rejected { status, body: text }),
            }
        }
        Err(HttpError::Unavailable { attempts: max, last })
    }

    /// Plain GET returning the decoded body; no retries.
    pub fn get<R: for<'de> Deserialize<'de>>(&self, path: &str) -> Result<R, HttpError> {
        let url = format!("{}{}", self.base_url, path);
        LIVE_REQUESTS.fetch_add(1, Ordering::SeqCst);
        let resp = self.client.get(&url).send().map_err(|e| HttpError::Unavailable {
            attempts: 1,
            last: e.to_string(),
        })?;
        let status = resp.status().as_u16();
        if !resp.status().is_success() {
            return Err(HttpError::Rejected {
                status,
                body: resp.text().unwrap_or_default(),
            });
        }
        resp.json::<R>().map_err(|e| HttpError::Decode(e.to_string()))
    }
}
