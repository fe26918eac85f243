//! JSONL sidecar for a [`VectorIndex`]: one header line carrying the
//! dimension, entry count and a SHA-256 over the entry lines, then one line
//! per entry.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Embedding, IndexEntry, Result, RetrievalError, VectorIndex};
use crate::digest::sha256_hex;

const FORMAT: &str = "medcorr-index";

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    backend: String,
    dim: usize,
    count: usize,
    checksum: String,
}

#[derive(Serialize, Deserialize)]
struct Line {
    note_id: String,
    error_flag: bool,
    vector: Embedding,
}

pub fn save_index(index: &VectorIndex, path: &Path) -> Result<()> {
    let lines: Vec<String> = index
        .entries()
        .iter()
        .map(|e| {
            serde_json::to_string(&Line {
                note_id: e.note_id.clone(),
                error_flag: e.error_flag,
                vector: e.embedding.clone(),
            })
            .expect("index line serializes")
        })
        .collect();
    let body = lines.join("\n");
    let header = Header {
        format: FORMAT.into(),
        version: 1,
        backend: index.backend_id().to_string(),
        dim: index.dim(),
        count: index.len(),
        checksum: sha256_hex(&body),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    if !body.is_empty() {
        out.push_str(&body);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| RetrievalError::Io(format!("{}: {e}", path.display())))
}

pub fn load_index(path: &Path) -> Result<VectorIndex> {
    let text = fs::read_to_string(path).map_err(|e| RetrievalError::Io(format!("{}: {e}", path.display())))?;
    let integrity = |msg: String| RetrievalError::Integrity(format!("{}: {msg}", path.display()));
    let (head, body) = text.split_once('\n').unwrap_or((text.as_str(), ""));
    let header: Header = serde_json::from_str(head).map_err(|e| integrity(format!("bad header: {e}")))?;
    if header.format != FORMAT {
        return Err(integrity(format!("unknown format {:?}", header.format)));
    }
    let body = body.strip_suffix('\n').unwrap_or(body);
    if sha256_hex(body) != header.checksum {
        return Err(integrity("checksum mismatch".into()));
    }
    let mut entries = Vec::with_capacity(header.count);
    for (i, line) in body.lines().enumerate() {
        let l: Line = serde_json::from_str(line).map_err(|e| integrity(format!("entry {i}: {e}")))?;
        if l.vector.dim() != header.dim {
            return Err(integrity(format!(
                "entry {i} has dim {}, header says {}",
                l.vector.dim(),
                header.dim
            )));
        }
        entries.push(IndexEntry {
            note_id: l.note_id,
            embedding: l.vector,
            error_flag: l.error_flag,
        });
    }
    if entries.len() != header.count {
        return Err(integrity(format!(
            "header says {} entries, found {}",
            header.count,
            entries.len()
        )));
    }
    VectorIndex::build(header.backend, entries).map_err(|e| integrity(e.to_string()))
}
