//! Scoring of prediction files against references: detection and span
//! accuracy, ROUGE-1 F1, optional neural similarity metrics from an external
//! scoring service, and aggregate report columns.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::{ArtifactError, Prediction, RunHeader};
use crate::http::{HttpError, JsonClient, RetryPolicy};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("prediction and reference note ids differ ({detail})")]
    MisalignedIds { detail: String },
    #[error("nothing to score")]
    EmptySet,
    #[error("scorer for {0} is unavailable: {1}")]
    ScorerUnavailable(String, String),
    #[error("scorer returned a malformed response: {0}")]
    ScorerResponse(String),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Rouge1,
    Bertscore,
    Bleurt,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Rouge1, Metric::Bertscore, Metric::Bleurt];
    /// Metrics served by the external scoring service.
    pub const NEURAL: [Metric; 2] = [Metric::Bertscore, Metric::Bleurt];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Rouge1 => "rouge1",
            Metric::Bertscore => "bertscore",
            Metric::Bleurt => "bleurt",
        }
    }
}

/// Pairs each prediction with its reference, requiring identical id sets.
pub fn align<'a>(preds: &'a [Prediction], refs: &'a [Prediction]) -> Result<Vec<(&'a Prediction, &'a Prediction)>> {
    let by_id: BTreeMap<&str, &Prediction> = refs.iter().map(|r| (r.note_id.as_str(), r)).collect();
    if by_id.len() != refs.len() {
        return Err(EvalError::MisalignedIds {
            detail: "duplicate reference ids".into(),
        });
    }
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(preds.len());
    for p in preds {
        if !seen.insert(p.note_id.as_str()) {
            return Err(EvalError::MisalignedIds {
                detail: format!("duplicate prediction id {:?}", p.note_id),
            });
        }
        let r = by_id.get(p.note_id.as_str()).ok_or_else(|| EvalError::MisalignedIds {
            detail: format!("{:?} has no reference", p.note_id),
        })?;
        out.push((p, *r));
    }
    if let Some(missing) = by_id.keys().find(|k| !seen.contains(*k)) {
        return Err(EvalError::MisalignedIds {
            detail: format!("{missing:?} has no prediction"),
        });
    }
    if out.is_empty() {
        return Err(EvalError::EmptySet);
    }
    Ok(out)
}

fn span_id(p: &Prediction) -> i64 {
    match (p.error_flag, p.error_sentence_id) {
        (true, Some(id)) => id as i64,
        _ => -1,
    }
}

fn fraction(hits: usize, total: usize) -> f64 {
    hits as f64 / total as f64
}

/// Fraction of notes whose predicted error flag equals the reference flag.
pub fn accuracy_flags(preds: &[Prediction], refs: &[Prediction]) -> Result<f64> {
    let pairs = align(preds, refs)?;
    let hits = pairs.iter().filter(|(p, r)| p.error_flag == r.error_flag).count();
    Ok(fraction(hits, pairs.len()))
}

/// Fraction of notes whose predicted sentence id equals the reference id,
/// with "no error" counted as id -1 on both sides.
pub fn accuracy_spans(preds: &[Prediction], refs: &[Prediction]) -> Result<f64> {
    let pairs = align(preds, refs)?;
    let hits = pairs.iter().filter(|(p, r)| span_id(p) == span_id(r)).count();
    Ok(fraction(hits, pairs.len()))
}

/// Lowercases, drops punctuation and splits on whitespace.
pub fn rouge_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c.is_whitespace() {
                c
            } else {
                ' '
            }
        })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Unigram-overlap F1 with clipped counts. Both empty scores 1, exactly one
/// empty scores 0.
pub fn rouge1_f1(candidate: &str, reference: &str) -> f64 {
    let c = rouge_tokens(candidate);
    let r = rouge_tokens(reference);
    match (c.is_empty(), r.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for t in &c {
        counts.entry(t).or_default().0 += 1;
    }
    for t in &r {
        counts.entry(t).or_default().1 += 1;
    }
    let overlap: usize = counts.values().map(|&(a, b)| a.min(b)).sum();
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / c.len() as f64;
    let rc = overlap as f64 / r.len() as f64;
    2.0 * p * rc / (p + rc)
}

fn correction_of(p: &Prediction) -> Option<&str> {
    if p.error_flag {
        p.corrected_sentence.as_deref()
    } else {
        None
    }
}

/// How a note's correction is scored before any metric is consulted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NlgCase<'a> {
    /// Neither side carries a correction: every metric scores 1.
    BothEmpty,
    /// Exactly one side carries a correction: every metric scores 0.
    OneEmpty,
    Pair {
        candidate: &'a str,
        reference: &'a str,
    },
}

/// A side without a correction (no error flagged, or flagged without a
/// corrected sentence) counts as "no error".
pub fn nlg_case<'a>(pred: &'a Prediction, reference: &'a Prediction) -> NlgCase<'a> {
    match (correction_of(pred), correction_of(reference)) {
        (None, None) => NlgCase::BothEmpty,
        (Some(c), Some(r)) => NlgCase::Pair {
            candidate: c,
            reference: r,
        },
        _ => NlgCase::OneEmpty,
    }
}

/// Scores candidate/reference pairs for one or more neural metrics.
pub trait PairScorer {
    fn score(&self, pairs: &[(String, String)], metrics: &[Metric]) -> Result<BTreeMap<Metric, Vec<f64>>>;
}

#[derive(Debug, Serialize)]
struct ScorePair<'a> {
    candidate: &'a str,
    reference: &'a str,
}

#[derive(Debug, Serialize)]
struct ScoreRequest<'a> {
    pairs: Vec<ScorePair<'a>>,
    metrics: Vec<&'static str>,
}

#[derive(Debug, Deserialize)]
struct ScoreResponse {
    scores: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    models: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct ScorerHealth {
    pub ready: bool,
    #[serde(default)]
    pub models: BTreeMap<String, String>,
}

/// Client of the neural scoring service (`POST /score`, `GET /health`).
pub struct HttpScorer {
    client: JsonClient,
    batch_size: usize,
}

impl HttpScorer {
    pub fn new(base_url: &str) -> Result<Self> {
        let retry = RetryPolicy {
            max_attempts: 2,
            ..RetryPolicy::default()
        };
        let client = JsonClient::new(base_url, None, retry, None, Duration::from_secs(300))
            .map_err(|e| EvalError::ScorerUnavailable("service".into(), e.to_string()))?;
        Ok(Self { client, batch_size: 64 })
    }

    pub fn health(&self) -> Result<ScorerHealth> {
        self.client
            .get("/health")
            .map_err(|e| EvalError::ScorerUnavailable("service".into(), e.to_string()))
    }
}

impl PairScorer for HttpScorer {
    fn score(&self, pairs: &[(String, String)], metrics: &[Metric]) -> Result<BTreeMap<Metric, Vec<f64>>> {
        let names = || metrics.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(",");
        let mut out: BTreeMap<Metric, Vec<f64>> = metrics.iter().map(|&m| (m, Vec::new())).collect();
        for chunk in pairs.chunks(self.batch_size.max(1)) {
            let req = ScoreRequest {
                pairs: chunk
                    .iter()
                    .map(|(c, r)| ScorePair {
                        candidate: c,
                        reference: r,
                    })
                    .collect(),
                metrics: metrics.iter().map(|m| m.as_str()).collect(),
            };
            let resp: ScoreResponse = self.client.post("/score", &req).map_err(|e| match e {
                HttpError::Decode(m) => EvalError::ScorerResponse(m),
                other => EvalError::ScorerUnavailable(names(), other.to_string()),
            })?;
            if !resp.models.is_empty() {
                log::debug!("scorer models: {:?}", resp.models);
            }
            for &m in metrics {
                let values = resp
                    .scores
                    .get(m.as_str())
                    .ok_or_else(|| EvalError::ScorerResponse(format!("no {} scores", m.as_str())))?;
                if values.len() != chunk.len() || values.iter().any(|v| !v.is_finite()) {
                    return Err(EvalError::ScorerResponse(format!(
                        "{}: expected {} finite scores, got {}",
                        m.as_str(),
                        chunk.len(),
                        values.len()
                    )));
                }
                out.get_mut(&m).unwrap().extend(values);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoteScore {
    pub note_id: String,
    pub flag_correct: bool,
    pub span_correct: bool,
    pub nlg: BTreeMap<Metric, f64>,
}

/// Metrics that could not be computed, with the reason.
pub type Unavailable = Vec<(Metric, String)>;

/// Per-note scores. ROUGE-1 is always computed; neural metrics are added when
/// `neural` is given and reachable, and listed as unavailable otherwise.
pub fn score_notes(
    preds: &[Prediction],
    refs: &[Prediction],
    neural: Option<&dyn PairScorer>,
) -> Result<(Vec<NoteScore>, Unavailable)> {
    let pairs = align(preds, refs)?;
    let mut notes: Vec<NoteScore> = pairs
        .iter()
        .map(|(p, r)| {
            let rouge = match nlg_case(p, r) {
                NlgCase::BothEmpty => 1.0,
                NlgCase::OneEmpty => 0.0,
                NlgCase::Pair { candidate, reference } => rouge1_f1(candidate, reference),
            };
            NoteScore {
                note_id: p.note_id.clone(),
                flag_correct: p.error_flag == r.error_flag,
                span_correct: span_id(p) == span_id(r),
                nlg: BTreeMap::from([(Metric::Rouge1, rouge)]),
            }
        })
        .collect();

    let mut unavailable = Vec::new();
    match neural {
        None => {
            for m in Metric::NEURAL {
                unavailable.push((m, "no scorer configured".to_string()));
            }
        }
        Some(scorer) => {
            let text_pairs: Vec<(usize, (String, String))> = pairs
                .iter()
                .enumerate()
                .filter_map(|(i, (p, r))| match nlg_case(p, r) {
                    NlgCase::Pair { candidate, reference } => Some((i, (candidate.to_string(), reference.to_string()))),
                    _ => None,
                })
                .collect();
            let batch: Vec<(String, String)> = text_pairs.iter().map(|(_, p)| p.clone()).collect();
            let scored = if batch.is_empty() {
                Ok(Metric::NEURAL.iter().map(|&m| (m, Vec::new())).collect())
            } else {
                scorer.score(&batch, &Metric::NEURAL)
            };
            match scored {
                Ok(scores) => {
                    for m in Metric::NEURAL {
                        for (note, (p, r)) in notes.iter_mut().zip(&pairs) {
                            match nlg_case(p, r) {
                                NlgCase::BothEmpty => note.nlg.insert(m, 1.0),
                                NlgCase::OneEmpty => note.nlg.insert(m, 0.0),
                                NlgCase::Pair { .. } => None,
                            };
                        }
                        for ((i, _), v) in text_pairs.iter().zip(&scores[&m]) {
                            notes[*i].nlg.insert(m, *v);
                        }
                    }
                }
                Err(e) => {
                    log::warn!("neural metrics unavailable: {e}");
                    for m in Metric::NEURAL {
                        unavailable.push((m, e.to_string()));
                    }
                }
            }
        }
    }
    Ok((notes, unavailable))
}

pub const COMPOSITE_LABEL: &str = "composite (local definition)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub dataset: String,
    pub notes: usize,
    pub acc_subtask1: f64,
    pub acc_subtask2: f64,
    /// Mean of the available metric columns.
    pub aggregate: f64,
    pub rouge1: f64,
    pub bertscore: Option<f64>,
    pub bleurt: Option<f64>,
    /// Mean over notes of the per-note metric mean, zeroed where the span is wrong.
    pub aggregate_composite: f64,
    /// Set when the aggregate omits unavailable metrics.
    pub footnote: Option<String>,
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn report_from_scores(
    dataset: &str,
    notes: &[NoteScore],
    unavailable: &[(Metric, String)],
) -> Result<EvaluationReport> {
    if notes.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let column = |m: Metric| -> Option<f64> {
        if unavailable.iter().any(|(u, _)| *u == m) {
            None
        } else {
            Some(mean(notes.iter().map(|n| n.nlg.get(&m).copied().unwrap_or(0.0))))
        }
    };
    let rouge1 = column(Metric::Rouge1).unwrap_or(0.0);
    let bertscore = column(Metric::Bertscore);
    let bleurt = column(Metric::Bleurt);
    let available: Vec<f64> = [Some(rouge1), bertscore, bleurt].into_iter().flatten().collect();
    let footnote = (!unavailable.is_empty()).then(|| {
        let names: Vec<&str> = unavailable.iter().map(|(m, _)| m.as_str()).collect();
        format!(
            "AG and AGC computed over available metrics only; unavailable: {}",
            names.join(", ")
        )
    });
    Ok(EvaluationReport {
        dataset: dataset.to_string(),
        notes: notes.len(),
        acc_subtask1: fraction(notes.iter().filter(|n| n.flag_correct).count(), notes.len()),
        acc_subtask2: fraction(notes.iter().filter(|n| n.span_correct).count(), notes.len()),
        aggregate: mean(available),
        rouge1,
        bertscore,
        bleurt,
        aggregate_composite: mean(notes.iter().map(|n| {
            if n.span_correct {
                mean(n.nlg.values().copied())
            } else {
                0.0
            }
        })),
        footnote,
    })
}

pub fn build_report(
    dataset: &str,
    preds: &[Prediction],
    refs: &[Prediction],
    neural: Option<&dyn PairScorer>,
) -> Result<(EvaluationReport, Vec<NoteScore>)> {
    let (notes, unavailable) = score_notes(preds, refs, neural)?;
    Ok((report_from_scores(dataset, &notes, &unavailable)?, notes))
}

pub const REPORT_COLUMNS: [&str; 9] = [
    "dataset",
    "notes",
    "acc_subtask1",
    "acc_subtask2",
    "AG",
    "R1",
    "BERT",
    "BLEURT",
    "AGC",
];

fn cell(v: Option<f64>, precision: Option<usize>) -> String {
    match (v, precision) {
        (None, _) => "NA".to_string(),
        (Some(v), Some(p)) => format!("{v:.p$}"),
        (Some(v), None) => format!("{v}"),
    }
}

fn row(r: &EvaluationReport, precision: Option<usize>) -> Vec<String> {
    vec![
        r.dataset.clone(),
        r.notes.to_string(),
        cell(Some(r.acc_subtask1), precision),
        cell(Some(r.acc_subtask2), precision),
        cell(Some(r.aggregate), precision),
        cell(Some(r.rouge1), precision),
        cell(r.bertscore, precision),
        cell(r.bleurt, precision),
        cell(Some(r.aggregate_composite), precision),
    ]
}

/// CSV with full-precision values; unavailable metrics are written as `NA`.
pub fn report_csv(header: Option<&RunHeader>, reports: &[EvaluationReport]) -> String {
    let mut out = String::new();
    if let Some(h) = header {
        let _ = writeln!(out, "{}", h.line());
    }
    out.push_str(&REPORT_COLUMNS.join(","));
    out.push('\n');
    for r in reports {
        let mut wtr = csv::WriterBuilder::new()
            .has_headers(false)
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        wtr.write_record(row(r, None)).expect("in-memory write");
        out.push_str(&String::from_utf8(wtr.into_inner().expect("in-memory flush")).expect("utf-8"));
    }
    out
}

/// Aligned plain-text table with four decimals and footnotes.
pub fn report_table(reports: &[EvaluationReport]) -> String {
    let rows: Vec<Vec<String>> = std::iter::once(REPORT_COLUMNS.iter().map(|s| s.to_string()).collect())
        .chain(reports.iter().map(|r| row(r, Some(4))))
        .collect();
    let widths: Vec<usize> = (0..REPORT_COLUMNS.len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, r) in rows.iter().enumerate() {
        let line: Vec<String> = r
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (v, w))| if c == 0 { format!("{v:<w$}") } else { format!("{v:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
        if i == 0 {
            let _ = writeln!(
                out,
                "{}",
                "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1))
            );
        }
    }
    let _ = writeln!(out, "\nAGC: {COMPOSITE_LABEL}.");
    let mut seen = HashSet::new();
    for r in reports {
        if let Some(f) = &r.footnote {
            if seen.insert(f.clone()) {
                let _ = writeln!(out, "* {f}");
            }
        }
    }
    out
}

pub fn write_report(
    dir: &Path,
    stem: &str,
    header: Option<&RunHeader>,
    reports: &[EvaluationReport],
) -> Result<(), ArtifactError> {
    let io = |path: &Path| {
        let p = path.display().to_string();
        move |e: std::io::Error| ArtifactError::Io {
            path: p.clone(),
            message: e.to_string(),
        }
    };
    let csv_path = dir.join(format!("{stem}.csv"));
    std::fs::write(&csv_path, report_csv(header, reports)).map_err(io(&csv_path))?;
    let txt_path = dir.join(format!("{stem}.txt"));
    let mut text = String::new();
    if let Some(h) = header {
        let _ = writeln!(text, "{}", h.line());
    }
    text.push_str(&report_table(reports));
    std::fs::write(&txt_path, text).map_err(io(&txt_path))
}
