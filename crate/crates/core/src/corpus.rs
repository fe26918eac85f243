//! Clinical-note datasets: parsing of the line-numbered note convention,
//! CSV/JSONL persistence, and invariant validation.
//!
//! Sentence IDs always come from the leading integer of each line. They are
//! the span unit that sub-task 2 is scored on, so nothing here re-splits text.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Literal used for "no corrected sentence" in the on-disk formats.
pub const NA: &str = "NA";

/// Sentinel sentence id used on disk for error-free notes.
pub const NO_SENTENCE: i64 = -1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("row {row_no}: {reason}")]
    MalformedRow { row_no: usize, reason: String },
    #[error("duplicate note id {0:?}")]
    DuplicateNoteId(String),
    #[error("missing column {0:?}")]
    MissingColumn(String),
    #[error("sentence ids are not contiguous: expected {expected}, found {found}")]
    NonContiguousIds { expected: usize, found: usize },
    #[error("line {line_no} has no leading sentence number: {line:?}")]
    UnnumberedLine { line_no: usize, line: String },
    #[error("sentence {0} has no text")]
    EmptySentence(usize),
    #[error("note has no sentences")]
    EmptyNote,
    #[error("unknown format {0:?} (expected csv or jsonl)")]
    UnknownFormat(String),
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub id: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClinicalNote {
    pub note_id: String,
    pub raw_text: String,
    pub sentences: Vec<Sentence>,
}

impl ClinicalNote {
    /// Builds a note from line-numbered text (`"0 ...\n1 ..."`).
    pub fn from_numbered(note_id: impl Into<String>, raw_text: impl Into<String>) -> Result<Self> {
        let raw_text = raw_text.into();
        let sentences = parse_sentences(&raw_text)?;
        Ok(Self {
            note_id: note_id.into(),
            raw_text,
            sentences,
        })
    }

    pub fn sentence(&self, id: usize) -> Option<&Sentence> {
        self.sentences.get(id).filter(|s| s.id == id)
    }

    pub fn has_sentence(&self, id: usize) -> bool {
        self.sentence(id).is_some()
    }

    /// The note in its canonical numbered form, one `"<id> <text>"` line per sentence.
    pub fn numbered_text(&self) -> String {
        self.sentences
            .iter()
            .map(|s| format!("{} {}", s.id, s.text))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Text used for embedding: sentences without their numbers.
    pub fn plain_text(&self) -> String {
        self.sentences
            .iter()
            .map(|s| s.text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Gold or predicted triple for the three sub-tasks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorAnnotation {
    pub error_flag: bool,
    pub error_sentence_id: Option<usize>,
    pub corrected_sentence: Option<String>,
}

impl ErrorAnnotation {
    pub fn no_error() -> Self {
        Self {
            error_flag: false,
            error_sentence_id: None,
            corrected_sentence: None,
        }
    }

    pub fn error(sentence_id: usize, corrected: impl Into<String>) -> Self {
        Self {
            error_flag: true,
            error_sentence_id: Some(sentence_id),
            corrected_sentence: Some(corrected.into()),
        }
    }

    /// Coupling and range checks against `note`. Returns one reason per problem.
    pub fn problems(&self, note: &ClinicalNote) -> Vec<String> {
        let mut out = Vec::new();
        if self.error_flag {
            match self.error_sentence_id {
                None => out.push("error_flag is set but error_sentence_id is missing".to_string()),
                Some(id) if !note.has_sentence(id) => out.push(format!(
                    "error_sentence_id {id} is not a sentence of the note ({} sentences)",
                    note.sentences.len()
                )),
                Some(_) => {}
            }
            match &self.corrected_sentence {
                Some(c) if !c.trim().is_empty() => {}
                _ => out.push("error_flag is set but corrected_sentence is missing".to_string()),
            }
        } else {
            if self.error_sentence_id.is_some() {
                out.push("error_flag is unset but error_sentence_id is present".to_string());
            }
            if self.corrected_sentence.is_some() {
                out.push("error_flag is unset but corrected_sentence is present".to_string());
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DatasetName {
    MsTrain,
    MsVal,
    UwVal,
    Test,
    Custom,
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DatasetName::MsTrain => "MS_TRAIN",
            DatasetName::MsVal => "MS_VAL",
            DatasetName::UwVal => "UW_VAL",
            DatasetName::Test => "TEST",
            DatasetName::Custom => "CUSTOM",
        };
        f.write_str(s)
    }
}

impl FromStr for DatasetName {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "MS_TRAIN" => Ok(DatasetName::MsTrain),
            "MS_VAL" => Ok(DatasetName::MsVal),
            "UW_VAL" => Ok(DatasetName::UwVal),
            "TEST" => Ok(DatasetName::Test),
            "CUSTOM" => Ok(DatasetName::Custom),
            other => Err(format!("unknown dataset name {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetEntry {
    pub note: ClinicalNote,
    pub annotation: Option<ErrorAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub name: DatasetName,
    pub entries: Vec<DatasetEntry>,
}

impl Dataset {
    pub fn new(name: DatasetName) -> Self {
        Self {
            name,
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, note_id: &str) -> Option<&DatasetEntry> {
        self.entries.iter().find(|e| e.note.note_id == note_id)
    }

    pub fn notes(&self) -> impl Iterator<Item = &ClinicalNote> {
        self.entries.iter().map(|e| &e.note)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Jsonl,
}

impl FromStr for Format {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "jsonl" => Ok(Format::Jsonl),
            other => Err(CorpusError::UnknownFormat(other.to_string())),
        }
    }
}

impl Format {
    /// Guesses the format from a file extension, defaulting to CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("jsonl") => Format::Jsonl,
            _ => Format::Csv,
        }
    }
}

/// Parses the dataset's `"N text"` convention into sentences.
///
/// Lines are trimmed; blank lines are skipped. Ids must run 0, 1, 2, ...
pub fn parse_sentences(raw_numbered_text: &str) -> Result<Vec<Sentence>> {
    let mut sentences = Vec::new();
    for (line_no, line) in raw_numbered_text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let digits_end = line
            .char_indices()
            .find(|(_, c)| !c.is_ascii_digit())
            .map(|(i, _)| i)
            .unwrap_or(line.len());
        let unnumbered = || CorpusError::UnnumberedLine {
            line_no,
            line: line.to_string(),
        };
        if digits_end == 0 {
            return Err(unnumbered());
        }
        let rest = &line[digits_end..];
        if !rest.is_empty() && !rest.starts_with(char::is_whitespace) {
            return Err(unnumbered());
        }
        let id: usize = line[..digits_end].parse().map_err(|_| unnumbered())?;
        let expected = sentences.len();
        if id != expected {
            return Err(CorpusError::NonContiguousIds { expected, found: id });
        }
        let text = rest.trim();
        if text.is_empty() {
            return Err(CorpusError::EmptySentence(id));
        }
        sentences.push(Sentence {
            id,
            text: text.to_string(),
        });
    }
    if sentences.is_empty() {
        return Err(CorpusError::EmptyNote);
    }
    Ok(sentences)
}

/// One invariant violation found by [`validate`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub note_id: String,
    pub reason: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.note_id, self.reason)
    }
}

/// Returns every invariant violation in `dataset`; empty iff well-formed.
pub fn validate(dataset: &Dataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for entry in &dataset.entries {
        let note = &entry.note;
        let mut push = |reason: String| {
            out.push(Violation {
                note_id: note.note_id.clone(),
                reason,
            })
        };
        if !seen.insert(note.note_id.as_str()) {
            push("duplicate note_id".to_string());
        }
        if note.sentences.is_empty() {
            push("note has no sentences".to_string());
        }
        for (pos, s) in note.sentences.iter().enumerate() {
            if s.id != pos {
                push(format!("sentence at position {pos} has id {}", s.id));
            }
            if s.text.trim().is_empty() {
                push(format!("sentence {} has empty text", s.id));
            }
        }
        match &entry.annotation {
            Some(a) => a.problems(note).into_iter().for_each(&mut push),
            None if dataset.name != DatasetName::Test => push("annotation missing".to_string()),
            None => {}
        }
    }
    out
}

/// Canonical flat row shared by the CSV and JSONL formats.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Row {
    note_id: String,
    text: String,
    #[serde(default)]
    error_flag: Option<serde_json::Value>,
    #[serde(default)]
    error_sentence_id: Option<serde_json::Value>,
    #[serde(default)]
    corrected_sentence: Option<String>,
}

const COLUMNS: [&str; 5] = [
    "note_id",
    "text",
    "error_flag",
    "error_sentence_id",
    "corrected_sentence",
];

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Loads a dataset file. Row numbers in errors are 1-based data rows.
pub fn load_dataset(path: &Path, format: Format, name: DatasetName) -> Result<Dataset> {
    let file = File::open(path).map_err(io_err(path))?;
    let rows = match format {
        Format::Csv => read_csv_rows(BufReader::new(file))?,
        Format::Jsonl => read_jsonl_rows(BufReader::new(file), path)?,
    };
    let mut dataset = Dataset::new(name);
    let mut seen = HashSet::new();
    for (idx, fields) in rows.into_iter().enumerate() {
        let row_no = idx + 1;
        let entry = entry_from_fields(row_no, fields)?;
        if !seen.insert(entry.note.note_id.clone()) {
            return Err(CorpusError::DuplicateNoteId(entry.note.note_id));
        }
        dataset.entries.push(entry);
    }
    Ok(dataset)
}

/// Raw string fields of one row, before interpretation.
struct RawFields {
    note_id: String,
    text: String,
    error_flag: String,
    error_sentence_id: String,
    corrected_sentence: String,
}

fn read_csv_rows<R: std::io::Read>(reader: R) -> Result<Vec<RawFields>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| CorpusError::MalformedRow {
            row_no: 0,
            reason: e.to_string(),
        })?
        .clone();
    let mut positions = [0usize; 5];
    for (slot, col) in positions.iter_mut().zip(COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h.trim() == col)
            .ok_or_else(|| CorpusError::MissingColumn(col.to_string()))?;
    }
    let mut out = Vec::new();
    for (idx, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| CorpusError::MalformedRow {
            row_no: idx + 1,
            reason: e.to_string(),
        })?;
        let get = |i: usize| record.get(positions[i]).unwrap_or("").to_string();
        out.push(RawFields {
            note_id: get(0),
            text: get(1),
            error_flag: get(2),
            error_sentence_id: get(3),
            corrected_sentence: get(4),
        });
    }
    Ok(out)
}

fn json_scalar(v: &Option<serde_json::Value>) -> String {
    match v {
        None | Some(serde_json::Value::Null) => String::new(),
        Some(serde_json::Value::Bool(b)) => if *b { "1" } else { "0" }.to_string(),
        Some(serde_json::Value::String(s)) => s.clone(),
        Some(other) => other.to_string(),
    }
}

fn read_jsonl_rows<R: BufRead>(reader: R, path: &Path) -> Result<Vec<RawFields>> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(io_err(path))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let row_no = out.len() + 1;
        let value: serde_json::Value = serde_json::from_str(trimmed).map_err(|e| CorpusError::MalformedRow {
            row_no,
            reason: e.to_string(),
        })?;
        for col in &COLUMNS[..2] {
            if value.get(col).is_none() {
                return Err(CorpusError::MissingColumn(col.to_string()));
            }
        }
        let row: Row = serde_json::from_value(value).map_err(|e| CorpusError::MalformedRow {
            row_no,
            reason: e.to_string(),
        })?;
        out.push(RawFields {
            note_id: row.note_id,
            text: row.text,
            error_flag: json_scalar(&row.error_flag),
            error_sentence_id: json_scalar(&row.error_sentence_id),
            corrected_sentence: row.corrected_sentence.unwrap_or_default(),
        });
    }
    Ok(out)
}

fn entry_from_fields(row_no: usize, f: RawFields) -> Result<DatasetEntry> {
    let malformed = |reason: String| CorpusError::MalformedRow { row_no, reason };
    let note_id = f.note_id.trim().to_string();
    if note_id.is_empty() {
        return Err(malformed("empty note_id".into()));
    }
    let note = ClinicalNote::from_numbered(note_id, f.text.clone()).map_err(|e| malformed(format!("text: {e}")))?;

    let flag = f.error_flag.trim();
    if flag.is_empty() || flag.eq_ignore_ascii_case(NA) {
        return Ok(DatasetEntry { note, annotation: None });
    }
    let error_flag = match flag.to_ascii_lowercase().as_str() {
        "1" | "true" => true,
        "0" | "false" => false,
        other => return Err(malformed(format!("error_flag {other:?} is not 0/1"))),
    };
    let sid_text = f.error_sentence_id.trim();
    let sid: i64 = if sid_text.is_empty() || sid_text.eq_ignore_ascii_case(NA) {
        NO_SENTENCE
    } else {
        sid_text
            .parse()
            .map_err(|_| malformed(format!("error_sentence_id {sid_text:?} is not an integer")))?
    };
    if error_flag && sid < 0 {
        return Err(malformed(format!("error_flag=1 requires a sentence id, got {sid}")));
    }
    if sid < NO_SENTENCE {
        return Err(malformed(format!("error_sentence_id {sid} is negative")));
    }
    let corrected = f.corrected_sentence.trim();
    let corrected_sentence = if corrected.is_empty() || corrected == NA {
        None
    } else {
        Some(corrected.to_string())
    };
    Ok(DatasetEntry {
        note,
        annotation: Some(ErrorAnnotation {
            error_flag,
            error_sentence_id: (sid >= 0).then_some(sid as usize),
            corrected_sentence,
        }),
    })
}

fn annotation_fields(a: &Option<ErrorAnnotation>) -> (String, String, String) {
    match a {
        None => (String::new(), String::new(), String::new()),
        Some(a) => (
            if a.error_flag { "1" } else { "0" }.to_string(),
            a.error_sentence_id
                .map(|i| i.to_string())
                .unwrap_or_else(|| NO_SENTENCE.to_string()),
            a.corrected_sentence.clone().unwrap_or_else(|| NA.to_string()),
        ),
    }
}

/// Writes `dataset` in the canonical schema. Note text is written as given.
pub fn write_dataset(dataset: &Dataset, path: &Path, format: Format) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    match format {
        Format::Csv => {
            let mut wtr = csv::Writer::from_writer(&mut w);
            let csv_err = |e: csv::Error| CorpusError::Io {
                path: path.display().to_string(),
                source: std::io::Error::other(e.to_string()),
            };
            wtr.write_record(COLUMNS).map_err(csv_err)?;
            for e in &dataset.entries {
                let (flag, sid, corr) = annotation_fields(&e.annotation);
                wtr.write_record([e.note.note_id.as_str(), e.note.raw_text.as_str(), &flag, &sid, &corr])
                    .map_err(csv_err)?;
            }
            wtr.flush().map_err(io_err(path))?;
        }
        Format::Jsonl => {
            for e in &dataset.entries {
                let value = match &e.annotation {
                    None => serde_json::json!({
                        "note_id": e.note.note_id,
                        "text": e.note.raw_text,
                        "error_flag": null,
                        "error_sentence_id": null,
                        "corrected_sentence": null,
                    }),
                    Some(a) => serde_json::json!({
                        "note_id": e.note.note_id,
                        "text": e.note.raw_text,
                        "error_flag": u8::from(a.error_flag),
                        "error_sentence_id": a.error_sentence_id.map(|i| i as i64).unwrap_or(NO_SENTENCE),
                        "corrected_sentence": a.corrected_sentence.clone().unwrap_or_else(|| NA.to_string()),
                    }),
                };
                writeln!(w, "{value}").map_err(io_err(path))?;
            }
        }
    }
    w.flush().map_err(io_err(path))
}
