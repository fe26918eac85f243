//! Append-only JSONL session files: `{hash, request, response, ts}` per line.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{Backend, ChatRequest, ChatResponse, LlmError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub hash: String,
    pub request: ChatRequest,
    pub response: String,
    pub ts: u64,
}

fn load_records(path: &Path) -> Result<HashMap<String, String>, LlmError> {
    let mut map = HashMap::new();
    if !path.exists() {
        return Ok(map);
    }
    let f = File::open(path).map_err(|e| LlmError::Session(format!("{}: {e}", path.display())))?;
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| LlmError::Session(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SessionRecord = serde_json::from_str(&line)
            .map_err(|e| LlmError::Session(format!("{} line {}: {e}", path.display(), i + 1)))?;
        map.entry(rec.hash).or_insert(rec.response);
    }
    Ok(map)
}

fn cached(text: &str, id: &str) -> ChatResponse {
    ChatResponse {
        text: text.to_string(),
        backend_id: id.to_string(),
        latency_ms: 0,
        from_cache: true,
    }
}

/// Serves responses only from a session file; a miss is an error.
#[derive(Debug)]
pub struct ReplayBackend {
    id: String,
    records: HashMap<String, String>,
    served: AtomicUsize,
}

impl ReplayBackend {
    pub fn open(path: &Path) -> Result<Self, LlmError> {
        if !path.exists() {
            return Err(LlmError::Session(format!("{} does not exist", path.display())));
        }
        Ok(Self {
            id: format!("replay:{}", path.display()),
            records: load_records(path)?,
            served: AtomicUsize::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn served(&self) -> usize {
        self.served.load(Ordering::SeqCst)
    }
}

impl Backend for ReplayBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let hash = req.hash();
        match self.records.get(&hash) {
            Some(text) => {
                self.served.fetch_add(1, Ordering::SeqCst);
                Ok(cached(text, &self.id))
            }
            None => Err(LlmError::ReplayMiss(hash)),
        }
    }
}

/// Wraps another backend: hits already in the session file are served from
/// it, misses go to the inner backend and are appended.
pub struct RecordingBackend<B> {
    id: String,
    inner: B,
    path: PathBuf,
    records: Mutex<HashMap<String, String>>,
    writer: Mutex<File>,
}

impl<B: Backend> RecordingBackend<B> {
    pub fn open(path: &Path, inner: B) -> Result<Self, LlmError> {
        let records = load_records(path)?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| LlmError::Session(e.to_string()))?;
        }
        let writer = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| LlmError::Session(format!("{}: {e}", path.display())))?;
        Ok(Self {
            id: format!("record:{}", inner.id()),
            inner,
            path: path.to_path_buf(),
            records: Mutex::new(records),
            writer: Mutex::new(writer),
        })
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl<B: Backend> Backend for RecordingBackend<B> {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let hash = req.hash();
        if let Some(text) = self.records.lock().expect("session poisoned").get(&hash) {
            return Ok(cached(text, &self.id));
        }
        let resp = self.inner.complete(req)?;
        let rec = SessionRecord {
            hash: hash.clone(),
            request: req.clone(),
            response: resp.text.clone(),
            ts: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        let line = serde_json::to_string(&rec).expect("record serializes");
        {
            let mut w = self.writer.lock().expect("session poisoned");
            writeln!(w, "{line}").map_err(|e| LlmError::Session(e.to_string()))?;
            w.flush().map_err(|e| LlmError::Session(e.to_string()))?;
        }
        self.records
            .lock()
            .expect("session poisoned")
            .insert(hash, resp.text.clone());
        Ok(resp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionMode {
    Record,
    Replay,
}

/// Builds a session-backed backend. Record mode requires `inner`.
pub fn record_replay(
    session_path: &Path,
    mode: SessionMode,
    inner: Option<Box<dyn Backend>>,
) -> Result<Box<dyn Backend>, LlmError> {
    match mode {
        SessionMode::Replay => Ok(Box::new(ReplayBackend::open(session_path)?)),
        SessionMode::Record => {
            let inner = inner.ok_or_else(|| LlmError::Session("record mode needs an inner backend".into()))?;
            Ok(Box::new(RecordingBackend::open(session_path, inner)?))
        }
    }
}
