use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Embedding, Result, RetrievalError};
use crate::digest::{sha256_hex, sha256_u64};
use crate::http::{HttpError, JsonClient, RetryPolicy};

/// Anything that turns a batch of texts into vectors, one per text.
pub trait EmbeddingBackend: Send + Sync {
    /// Stable identifier used as the cache key namespace.
    fn id(&self) -> String;

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedOptions {
    pub batch_size: usize,
    pub max_in_flight: usize,
}

impl Default for EmbedOptions {
    fn default() -> Self {
        Self {
            batch_size: 64,
            max_in_flight: 4,
        }
    }
}

impl<B: EmbeddingBackend + ?Sized> EmbeddingBackend for Box<B> {
    fn id(&self) -> String {
        (**self).id()
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        (**self).embed(texts)
    }
}

/// Embeds `texts` in order, with at most `max_in_flight` batches outstanding.
pub fn embed_batch(texts: &[String], backend: &dyn EmbeddingBackend, opts: EmbedOptions) -> Result<Vec<Embedding>> {
    if texts.is_empty() {
        return Err(RetrievalError::EmptyInput);
    }
    let batches: Vec<&[String]> = texts.chunks(opts.batch_size.max(1)).collect();
    let mut raw: Vec<Vec<f64>> = Vec::with_capacity(texts.len());
    for wave in batches.chunks(opts.max_in_flight.max(1)) {
        let results: Vec<Result<Vec<Vec<f64>>>> = if wave.len() == 1 {
            vec![backend.embed(wave[0])]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = wave.iter().map(|b| s.spawn(move || backend.embed(b))).collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("embedding worker panicked"))
                    .collect()
            })
        };
        for (batch, result) in wave.iter().zip(results) {
            let vectors = result?;
            if vectors.len() != batch.len() {
                return Err(RetrievalError::BackendUnavailable(format!(
                    "backend returned {} vectors for {} inputs",
                    vectors.len(),
                    batch.len()
                )));
            }
            raw.extend(vectors);
        }
    }
    let dim = raw[0].len();
    raw.into_iter()
        .map(|v| {
            if v.len() != dim {
                return Err(RetrievalError::DimensionMismatch {
                    expected: dim,
                    found: v.len(),
                });
            }
            Embedding::new(v)
        })
        .collect()
}

/// Deterministic offline embedder: signed feature hashing of lowercase word
/// unigrams and bigrams into `dim` buckets. Stands in for a real model in
/// tests and mock runs.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "dim must be positive");
        Self { dim }
    }

    fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let words: Vec<String> = text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .collect();
        let mut add = |feature: &str, weight: f64| {
            let h = sha256_u64(feature);
            let bucket = (h % self.dim as u64) as usize;
            let sign = if (h >> 63) == 1 { -1.0 } else { 1.0 };
            v[bucket] += sign * weight;
        };
        for w in &words {
            add(w, 1.0);
        }
        for pair in words.windows(2) {
            add(&format!("{} {}", pair[0], pair[1]), 0.5);
        }
        if v.iter().all(|x| *x == 0.0) {
            v[0] = 1.0;
        }
        v
    }
}

impl EmbeddingBackend for HashingEmbedder {
    fn id(&self) -> String {
        format!("hashing-{}", self.dim)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// OpenAI-compatible `POST {base_url}/embeddings` client.
#[derive(Debug)]
pub struct HttpEmbedder {
    client: JsonClient,
    model: String,
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
    #[serde(default)]
    index: Option<usize>,
}

impl HttpEmbedder {
    pub fn new(
        base_url: &str,
        model: &str,
        api_key: Option<String>,
        retry: RetryPolicy,
        per_minute: Option<u32>,
    ) -> Result<Self> {
        let client = JsonClient::new(base_url, api_key, retry, per_minute, Duration::from_secs(120))
            .map_err(|e| RetrievalError::BackendUnavailable(e.to_string()))?;
        Ok(Self {
            client,
            model: model.to_string(),
        })
    }
}

impl EmbeddingBackend for HttpEmbedder {
    fn id(&self) -> String {
        format!("http:{}:{}", self.client.base_url(), self.model)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let resp: EmbeddingResponse = self
            .client
            .post(
                "/embeddings",
                &EmbeddingRequest {
                    model: &self.model,
                    input: texts,
                },
            )
            .map_err(|e: HttpError| RetrievalError::BackendUnavailable(e.to_string()))?;
        let mut data = resp.data;
        if data.iter().all(|d| d.index.is_some()) {
            data.sort_by_key(|d| d.index);
        }
        Ok(data.into_iter().map(|d| d.embedding).collect())
    }
}

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    backend: String,
    hash: String,
    vector: Vec<f64>,
}

/// Disk-backed cache keyed by (backend id, SHA-256 of the text).
///
/// The cache file is JSONL and append-only; misses are embedded as one batch
/// through the wrapped backend and appended.
pub struct CachedEmbedder<B> {
    inner: B,
    path: Option<PathBuf>,
    entries: Mutex<HashMap<(String, String), Vec<f64>>>,
    misses: AtomicUsize,
}

impl<B: EmbeddingBackend> CachedEmbedder<B> {
    /// In-memory only.
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            path: None,
            entries: Mutex::new(HashMap::new()),
            misses: AtomicUsize::new(0),
        }
    }

    /// Loads any existing records at `path`; new records are appended there.
    pub fn with_file(inner: B, path: &Path) -> Result<Self> {
        let mut entries = HashMap::new();
        if path.exists() {
            let f = File::open(path).map_err(|e| RetrievalError::Io(e.to_string()))?;
            for line in BufReader::new(f).lines() {
                let line = line.map_err(|e| RetrievalError::Io(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: CacheRecord = serde_json::from_str(&line)
                    .map_err(|e| RetrievalError::Io(format!("embedding cache {}: {e}", path.display())))?;
                entries.insert((rec.backend, rec.hash), rec.vector);
            }
        }
        Ok(Self {
            inner,
            path: Some(path.to_path_buf()),
            entries: Mutex::new(entries),
            misses: AtomicUsize::new(0),
        })
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Texts sent to the wrapped backend since construction.
    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::SeqCst)
    }
}

impl<B: EmbeddingBackend> EmbeddingBackend for CachedEmbedder<B> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let backend = self.inner.id();
        let hashes: Vec<String> = texts.iter().map(sha256_hex).collect();
        let missing: Vec<usize> = {
            let entries = self.entries.lock().expect("cache poisoned");
            let mut seen = std::collections::HashSet::new();
            (0..texts.len())
                .filter(|&i| {
                    !entries.contains_key(&(backend.clone(), hashes[i].clone())) && seen.insert(hashes[i].clone())
                })
                .collect()
        };
        if !missing.is_empty() {
            let batch: Vec<String> = missing.iter().map(|&i| texts[i].clone()).collect();
            self.misses.fetch_add(batch.len(), Ordering::SeqCst);
            let vectors = self.inner.embed(&batch)?;
            if vectors.len() != batch.len() {
                return Err(RetrievalError::BackendUnavailable(format!(
                    "backend returned {} vectors for {} inputs",
                    vectors.len(),
                    batch.len()
                )));
            }
            let mut entries = self.entries.lock().expect("cache poisoned");
            let mut file = match &self.path {
                Some(p) => Some(
                    OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(p)
                        .map_err(|e| RetrievalError::Io(e.to_string()))?,
                ),
                None => None,
            };
            for (&i, v) in missing.iter().zip(vectors) {
                if let Some(f) = file.as_mut() {
                    let rec = CacheRecord {
                        backend: backend.clone(),
                        hash: hashes[i].clone(),
                        vector: v.clone(),
                    };
                    let line = serde_json::to_string(&rec).expect("cache record serializes");
                    writeln!(f, "{line}").map_err(|e| RetrievalError::Io(e.to_string()))?;
                }
                entries.insert((backend.clone(), hashes[i].clone()), v);
            }
        }
        let entries = self.entries.lock().expect("cache poisoned");
        Ok(hashes
            .into_iter()
            .map(|h| entries[&(backend.clone(), h)].clone())
            .collect())
    }
}
