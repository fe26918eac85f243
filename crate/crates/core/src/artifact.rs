//! Output artifacts: prediction CSVs and JSONL logs. Every file starts with a
//! `#` header line carrying the run's config hash and seed; readers skip `#` lines.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dataset, NA, NO_SENTENCE};
use crate::prompt::Verdict;

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("{path} row {row_no}: {reason}")]
    Malformed {
        path: String,
        row_no: usize,
        reason: String,
    },
    #[error("{path}: missing column {column:?}")]
    MissingColumn { path: String, column: String },
}

pub type Result<T, E = ArtifactError> = std::result::Result<T, E>;

/// Identifies the run that produced an artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunHeader {
    pub config_hash: String,
    pub seed: u64,
}

impl RunHeader {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        Self {
            config_hash: config_hash.into(),
            seed,
        }
    }

    pub fn line(&self) -> String {
        format!("# medcorr config={} seed={}", self.config_hash, self.seed)
    }

    /// Parses a header line written by [`RunHeader::line`].
    pub fn parse(line: &str) -> Option<Self> {
        let rest = line.strip_prefix("# medcorr ")?;
        let mut config_hash = None;
        let mut seed = None;
        for part in rest.split_whitespace() {
            if let Some(v) = part.strip_prefix("config=") {
                config_hash = Some(v.to_string());
            } else if let Some(v) = part.strip_prefix("seed=") {
                seed = v.parse().ok();
            }
        }
        Some(Self {
            config_hash: config_hash?,
            seed: seed?,
        })
    }
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> ArtifactError + '_ {
    move |e| ArtifactError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// One row of a prediction file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub note_id: String,
    pub error_flag: bool,
    pub error_sentence_id: Option<usize>,
    pub corrected_sentence: Option<String>,
}

impl Prediction {
    pub fn from_verdict(note_id: &str, v: &Verdict) -> Self {
        Self {
            note_id: note_id.to_string(),
            error_flag: v.error_flag,
            error_sentence_id: if v.error_flag { v.error_sentence_id } else { None },
            corrected_sentence: if v.error_flag {
                v.corrected_sentence.clone()
            } else {
                None
            },
        }
    }

    pub fn to_verdict(&self, provenance: &str) -> Verdict {
        Verdict {
            error_flag: self.error_flag,
            error_sentence_id: self.error_sentence_id,
            corrected_sentence: self.corrected_sentence.clone(),
            provenance: provenance.to_string(),
        }
    }

    /// Reference rows from an annotated dataset; unannotated notes are skipped.
    pub fn from_dataset(dataset: &Dataset) -> Vec<Self> {
        dataset
            .entries
            .iter()
            .filter_map(|e| {
                e.annotation.as_ref().map(|a| Self {
                    note_id: e.note.note_id.clone(),
                    error_flag: a.error_flag,
                    error_sentence_id: a.error_sentence_id,
                    corrected_sentence: a.corrected_sentence.clone(),
                })
            })
            .collect()
    }
}

const PRED_COLUMNS: [&str; 4] = ["note_id", "error_flag", "error_sentence_id", "corrected_sentence"];

pub fn write_predictions(path: &Path, header: Option<&RunHeader>, rows: &[Prediction]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(io(path))?);
    if let Some(h) = header {
        writeln!(w, "{}", h.line()).map_err(io(path))?;
    }
    {
        let mut csv = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(&mut w);
        let err = |e: csv::Error| ArtifactError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        csv.write_record(PRED_COLUMNS).map_err(err)?;
        for r in rows {
            csv.write_record([
                r.note_id.clone(),
                if r.error_flag { "1" } else { "0" }.to_string(),
                r.error_sentence_id
                    .map(|i| i.to_string())
                    .unwrap_or_else(|| NO_SENTENCE.to_string()),
                r.corrected_sentence.clone().unwrap_or_else(|| NA.to_string()),
            ])
            .map_err(err)?;
        }
        csv.flush().map_err(io(path))?;
    }
    w.flush().map_err(io(path))
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let p = path.display().to_string();
    let file = File::open(path).map_err(io(path))?;
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(BufReader::new(file));
    let headers = rdr
        .headers()
        .map_err(|e| ArtifactError::Malformed {
            path: p.clone(),
            row_no: 0,
            reason: e.to_string(),
        })?
        .clone();
    let mut pos = [0usize; 4];
    for (slot, col) in pos.iter_mut().zip(PRED_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h.trim() == col)
            .ok_or_else(|| ArtifactError::MissingColumn {
                path: p.clone(),
                column: col.to_string(),
            })?;
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row_no = i + 1;
        let malformed = |reason: String| ArtifactError::Malformed {
            path: p.clone(),
            row_no,
            reason,
        };
        let rec = rec.map_err(|e| malformed(e.to_string()))?;
        let field = |k: usize| rec.get(pos[k]).unwrap_or("").trim();
        let error_flag = match field(1) {
            "1" | "true" => true,
            "0" | "false" => false,
            other => return Err(malformed(format!("error_flag {other:?}"))),
        };
        let sid: i64 = field(2)
            .parse()
            .map_err(|_| malformed(format!("error_sentence_id {:?}", field(2))))?;
        let corrected = field(3);
        out.push(Prediction {
            note_id: field(0).to_string(),
            error_flag,
            error_sentence_id: (sid >= 0).then_some(sid as usize),
            corrected_sentence: (!corrected.is_empty() && corrected != NA).then(|| corrected.to_string()),
        });
    }
    Ok(out)
}

/// Writes one JSON object per line after the optional header.
pub fn write_jsonl<T: Serialize>(path: &Path, header: Option<&RunHeader>, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(io(path))?);
    if let Some(h) = header {
        writeln!(w, "{}", h.line()).map_err(io(path))?;
    }
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| ArtifactError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        writeln!(w, "{line}").map_err(io(path))?;
    }
    w.flush().map_err(io(path))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(io(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io(path))?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        out.push(serde_json::from_str(t).map_err(|e| ArtifactError::Malformed {
            path: path.display().to_string(),
            row_no: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}
