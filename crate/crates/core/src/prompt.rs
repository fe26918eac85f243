//! Prompt templates, in-context example serialization, and the keyed-line
//! answer grammar (`ERROR:` / `SENTENCE_ID:` / `CORRECTED:`).

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ClinicalNote, ErrorAnnotation};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PromptError {
    #[error("template {template}: placeholder {{{{{name}}}}} has no binding")]
    UnboundPlaceholder { template: TemplateName, name: String },
    #[error("example {0:?} has no reason")]
    ReasonMissing(String),
    #[error("unparseable response: {0}")]
    UnparseableResponse(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("template {template}: {reason}")]
    InvalidTemplate { template: TemplateName, reason: String },
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T, E = PromptError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TemplateName {
    StandardDetect,
    CotIntervention,
    CotDiagnosis,
    CotManagement,
    Correction,
    ReasonGenCorrect,
    ReasonGenIncorrect,
    ReasonIcl,
    EnsembleCorrection,
}

impl TemplateName {
    pub const ALL: [TemplateName; 9] = [
        TemplateName::StandardDetect,
        TemplateName::CotIntervention,
        TemplateName::CotDiagnosis,
        TemplateName::CotManagement,
        TemplateName::Correction,
        TemplateName::ReasonGenCorrect,
        TemplateName::ReasonGenIncorrect,
        TemplateName::ReasonIcl,
        TemplateName::EnsembleCorrection,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateName::StandardDetect => "STANDARD_DETECT",
            TemplateName::CotIntervention => "COT_INTERVENTION",
            TemplateName::CotDiagnosis => "COT_DIAGNOSIS",
            TemplateName::CotManagement => "COT_MANAGEMENT",
            TemplateName::Correction => "CORRECTION",
            TemplateName::ReasonGenCorrect => "REASON_GEN_CORRECT",
            TemplateName::ReasonGenIncorrect => "REASON_GEN_INCORRECT",
            TemplateName::ReasonIcl => "REASON_ICL",
            TemplateName::EnsembleCorrection => "ENSEMBLE_CORRECTION",
        }
    }

    /// File name inside a `prompts/` directory.
    pub fn file_name(self) -> String {
        format!("{}.txt", self.as_str().to_ascii_lowercase())
    }

    /// Detection-stage templates answer flag and sentence id only.
    pub fn is_detection(self) -> bool {
        matches!(
            self,
            TemplateName::StandardDetect
                | TemplateName::CotIntervention
                | TemplateName::CotDiagnosis
                | TemplateName::CotManagement
        )
    }

    fn builtin(self) -> &'static str {
        match self {
            TemplateName::StandardDetect => include_str!("../prompts/standard_detect.txt"),
            TemplateName::CotIntervention => include_str!("../prompts/cot_intervention.txt"),
            TemplateName::CotDiagnosis => include_str!("../prompts/cot_diagnosis.txt"),
            TemplateName::CotManagement => include_str!("../prompts/cot_management.txt"),
            TemplateName::Correction => include_str!("../prompts/correction.txt"),
            TemplateName::ReasonGenCorrect => include_str!("../prompts/reason_gen_correct.txt"),
            TemplateName::ReasonGenIncorrect => include_str!("../prompts/reason_gen_incorrect.txt"),
            TemplateName::ReasonIcl => include_str!("../prompts/reason_icl.txt"),
            TemplateName::EnsembleCorrection => include_str!("../prompts/ensemble_correction.txt"),
        }
    }
}

impl fmt::Display for TemplateName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateName {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let upper = s.trim().to_ascii_uppercase();
        TemplateName::ALL
            .into_iter()
            .find(|t| t.as_str() == upper)
            .ok_or_else(|| format!("unknown template {s:?}"))
    }
}

const BUILTIN_SYSTEM: &str = include_str!("../prompts/system.txt");

/// Appended to the user message when an answer could not be parsed.
pub const REMINDER: &str = "\n\nYour previous answer could not be read. Reply again using only the required lines, for example:\nERROR: yes\nSENTENCE_ID: 3\nCORRECTED: the corrected sentence\nor\nERROR: no";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub name: TemplateName,
    pub body: String,
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{\{\s*([A-Za-z_][A-Za-z0-9_]*)\s*\}\}").unwrap())
}

impl PromptTemplate {
    pub fn new(name: TemplateName, body: impl Into<String>) -> Result<Self> {
        let t = Self {
            name,
            body: body.into(),
        };
        t.check()?;
        Ok(t)
    }

    pub fn placeholders(&self) -> Vec<String> {
        placeholder_re()
            .captures_iter(&self.body)
            .map(|c| c[1].to_string())
            .collect()
    }

    /// The target note must come after the examples block.
    fn check(&self) -> Result<()> {
        let names = self.placeholders();
        let first = |p: &str| names.iter().position(|n| n == p);
        if first("note").is_none() {
            return Err(PromptError::InvalidTemplate {
                template: self.name,
                reason: "missing {{note}}".into(),
            });
        }
        if let (Some(ex), Some(note)) = (first("examples"), first("note")) {
            if note < ex {
                return Err(PromptError::InvalidTemplate {
                    template: self.name,
                    reason: "{{note}} must follow {{examples}}".into(),
                });
            }
        }
        Ok(())
    }
}

/// One solved training note shown to the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IclExample {
    pub note: ClinicalNote,
    pub annotation: ErrorAnnotation,
    pub reason: Option<String>,
}

/// The full set of templates plus the system message.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSet {
    templates: BTreeMap<TemplateName, PromptTemplate>,
    system: String,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateSet {
    pub fn builtin() -> Self {
        let templates = TemplateName::ALL
            .into_iter()
            .map(|n| {
                (
                    n,
                    PromptTemplate::new(n, n.builtin()).expect("builtin template is valid"),
                )
            })
            .collect();
        Self {
            templates,
            system: BUILTIN_SYSTEM.trim_end().to_string(),
        }
    }

    /// Loads `<dir>/<template>.txt` and `<dir>/system.txt`; files that are
    /// absent keep the built-in text.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut set = Self::builtin();
        for name in TemplateName::ALL {
            let p = dir.join(name.file_name());
            if p.exists() {
                let body = std::fs::read_to_string(&p).map_err(|e| PromptError::Io(format!("{}: {e}", p.display())))?;
                set.templates.insert(name, PromptTemplate::new(name, body)?);
            }
        }
        let sys = dir.join("system.txt");
        if sys.exists() {
            set.system = std::fs::read_to_string(&sys)
                .map_err(|e| PromptError::Io(format!("{}: {e}", sys.display())))?
                .trim_end()
                .to_string();
        }
        Ok(set)
    }

    pub fn with_template(mut self, template: PromptTemplate) -> Self {
        self.templates.insert(template.name, template);
        self
    }

    pub fn get(&self, name: TemplateName) -> &PromptTemplate {
        &self.templates[&name]
    }

    pub fn system(&self) -> &str {
        &self.system
    }

    /// Renders `template` for `note`. Examples are serialized in the given order.
    pub fn render(
        &self,
        template: TemplateName,
        note: &ClinicalNote,
        examples: &[IclExample],
        extra: &BTreeMap<String, String>,
    ) -> Result<String> {
        if template == TemplateName::ReasonIcl {
            if let Some(ex) = examples
                .iter()
                .find(|e| e.reason.as_deref().is_none_or(|r| r.trim().is_empty()))
            {
                return Err(PromptError::ReasonMissing(ex.note.note_id.clone()));
            }
        }
        if matches!(template, TemplateName::Correction | TemplateName::EnsembleCorrection) {
            let Some(id) = extra.get("sentence_id") else {
                return Err(PromptError::UnboundPlaceholder {
                    template,
                    name: "sentence_id".into(),
                });
            };
            let valid = id.parse::<usize>().map(|i| note.has_sentence(i)).unwrap_or(false);
            if !valid {
                return Err(PromptError::Precondition(format!(
                    "sentence_id {id} is not a sentence of note {}",
                    note.note_id
                )));
            }
        }
        let mut bindings: BTreeMap<&str, String> = BTreeMap::new();
        bindings.insert("note", note.numbered_text());
        bindings.insert("examples", format_examples(template, examples));
        for (k, v) in extra {
            bindings.insert(k.as_str(), v.clone());
        }
        fill(self.get(template), &bindings)
    }

    /// Asks for an explanation of why a training note is correct or incorrect.
    pub fn render_reason_request(&self, note: &ClinicalNote, annotation: &ErrorAnnotation) -> Result<String> {
        if annotation.error_flag {
            let problems = annotation.problems(note);
            if !problems.is_empty() {
                return Err(PromptError::Precondition(problems.join("; ")));
            }
            let id = annotation.error_sentence_id.expect("checked above");
            let sentence = note.sentence(id).expect("checked above");
            let bindings = BTreeMap::from([
                ("note", note.numbered_text()),
                ("sentence_id", id.to_string()),
                ("error_sentence", sentence.text.clone()),
                (
                    "corrected_sentence",
                    annotation.corrected_sentence.clone().expect("checked above"),
                ),
            ]);
            fill(self.get(TemplateName::ReasonGenIncorrect), &bindings)
        } else {
            let bindings = BTreeMap::from([("note", note.numbered_text())]);
            fill(self.get(TemplateName::ReasonGenCorrect), &bindings)
        }
    }
}

/// Single-pass placeholder substitution; bound values are never re-expanded.
fn fill(template: &PromptTemplate, bindings: &BTreeMap<&str, String>) -> Result<String> {
    let re = placeholder_re();
    let mut out = String::with_capacity(template.body.len() * 2);
    let mut last = 0;
    for cap in re.captures_iter(&template.body) {
        let m = cap.get(0).expect("whole match");
        let name = &cap[1];
        let value = bindings.get(name).ok_or_else(|| PromptError::UnboundPlaceholder {
            template: template.name,
            name: name.to_string(),
        })?;
        out.push_str(&template.body[last..m.start()]);
        out.push_str(value);
        last = m.end();
    }
    out.push_str(&template.body[last..]);
    Ok(out)
}

fn format_examples(template: TemplateName, examples: &[IclExample]) -> String {
    let mut out = String::new();
    for (i, ex) in examples.iter().enumerate() {
        out.push_str(&format!(
            "Example {}:\nClinical note:\n{}\n",
            i + 1,
            ex.note.numbered_text()
        ));
        if template == TemplateName::ReasonIcl {
            if let Some(r) = &ex.reason {
                out.push_str(&format!("Reason: {}\n", r.trim()));
            }
        }
        let a = &ex.annotation;
        let answer = match template {
            t if t.is_detection() => Verdict {
                error_flag: a.error_flag,
                error_sentence_id: a.error_sentence_id,
                corrected_sentence: None,
                provenance: String::new(),
            },
            TemplateName::Correction | TemplateName::EnsembleCorrection if a.error_flag => {
                out.push_str(&format!("Erroneous sentence: {}\n", a.error_sentence_id.unwrap_or(0)));
                out.push_str(&format!(
                    "Answer:\nCORRECTED: {}\n\n",
                    a.corrected_sentence.as_deref().unwrap_or_default()
                ));
                continue;
            }
            _ => Verdict::from_annotation(a, ""),
        };
        out.push_str(&format!("Answer:\n{}\n\n", format_verdict(&answer)));
    }
    out
}

/// One pipeline decision. `provenance` names the stage or sample that produced it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub error_flag: bool,
    pub error_sentence_id: Option<usize>,
    pub corrected_sentence: Option<String>,
    pub provenance: String,
}

impl Verdict {
    pub fn no_error(provenance: impl Into<String>) -> Self {
        Self {
            error_flag: false,
            error_sentence_id: None,
            corrected_sentence: None,
            provenance: provenance.into(),
        }
    }

    pub fn error(sentence_id: usize, corrected: Option<String>, provenance: impl Into<String>) -> Self {
        Self {
            error_flag: true,
            error_sentence_id: Some(sentence_id),
            corrected_sentence: corrected,
            provenance: provenance.into(),
        }
    }

    pub fn from_annotation(a: &ErrorAnnotation, provenance: impl Into<String>) -> Self {
        Self {
            error_flag: a.error_flag,
            error_sentence_id: a.error_sentence_id,
            corrected_sentence: a.corrected_sentence.clone(),
            provenance: provenance.into(),
        }
    }

    pub fn with_provenance(mut self, provenance: impl Into<String>) -> Self {
        self.provenance = provenance.into();
        self
    }

    /// Flag/id coupling holds (a correction is optional at detection time).
    pub fn is_consistent(&self) -> bool {
        if self.error_flag {
            self.error_sentence_id.is_some()
        } else {
            self.error_sentence_id.is_none() && self.corrected_sentence.is_none()
        }
    }
}

/// Emits the canonical answer grammar for `v` (provenance is not part of it).
pub fn format_verdict(v: &Verdict) -> String {
    if !v.error_flag {
        return "ERROR: no".to_string();
    }
    let mut s = "ERROR: yes".to_string();
    if let Some(id) = v.error_sentence_id {
        s.push_str(&format!("\nSENTENCE_ID: {id}"));
    }
    if let Some(c) = &v.corrected_sentence {
        s.push_str(&format!("\nCORRECTED: {c}"));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Key {
    Error,
    SentenceId,
    Corrected,
}

fn key_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)^[\s*#>\-]*(error|sentence[_ ]id|corrected)\s*\**\s*:\s*\**\s*").unwrap())
}

/// Splits one line into keyed values. A line must start with a key; keys
/// following an `ERROR`/`SENTENCE_ID` value on the same line are also read.
fn keyed_values(line: &str, out: &mut Vec<(Key, String)>) {
    let mut rest = line;
    while let Some(m) = key_re().captures(rest) {
        let key = match m[1].to_ascii_lowercase().as_str() {
            "error" => Key::Error,
            "corrected" => Key::Corrected,
            _ => Key::SentenceId,
        };
        let after = &rest[m.get(0).expect("whole match").end()..];
        if key == Key::Corrected {
            out.push((key, after.trim().trim_end_matches("**").trim().to_string()));
            return;
        }
        let after = after.trim_start();
        let end = after.find(char::is_whitespace).unwrap_or(after.len());
        out.push((key, after[..end].to_string()));
        rest = &after[end..];
    }
}

/// Parses the keyed-line answer grammar. Keys are case-insensitive, the first
/// occurrence of each key wins, and unkeyed prose is ignored.
pub fn parse_verdict(response_text: &str) -> Result<Verdict> {
    let mut pairs = Vec::new();
    for line in response_text.lines() {
        keyed_values(line, &mut pairs);
    }
    let first = |k: Key| pairs.iter().find(|(key, _)| *key == k).map(|(_, v)| v.as_str());
    let snippet = || {
        let t: String = response_text.chars().take(120).collect();
        t.replace('\n', "\\n")
    };
    let flag_word = first(Key::Error)
        .map(|v| {
            v.trim_matches(|c: char| !c.is_ascii_alphanumeric())
                .to_ascii_lowercase()
        })
        .ok_or_else(|| PromptError::UnparseableResponse(format!("no ERROR line in {:?}", snippet())))?;
    match flag_word.as_str() {
        "no" => Ok(Verdict::no_error("")),
        "yes" => {
            let raw = first(Key::SentenceId).ok_or_else(|| {
                PromptError::UnparseableResponse(format!("ERROR: yes without SENTENCE_ID in {:?}", snippet()))
            })?;
            let digits: String = raw.trim_matches(|c: char| !c.is_ascii_digit()).to_string();
            let id = digits
                .parse::<usize>()
                .map_err(|_| PromptError::UnparseableResponse(format!("SENTENCE_ID {raw:?} is not a number")))?;
            let corrected = first(Key::Corrected)
                .map(str::to_string)
                .filter(|c| !c.is_empty() && c != crate::corpus::NA);
            Ok(Verdict::error(id, corrected, ""))
        }
        other => Err(PromptError::UnparseableResponse(format!(
            "ERROR value {other:?} is neither yes nor no"
        ))),
    }
}

/// Parses a correction-only answer: the first `CORRECTED:` payload.
pub fn parse_correction(response_text: &str) -> Result<String> {
    let mut pairs = Vec::new();
    for line in response_text.lines() {
        keyed_values(line, &mut pairs);
    }
    pairs
        .into_iter()
        .find(|(k, v)| *k == Key::Corrected && !v.is_empty())
        .map(|(_, v)| v)
        .ok_or_else(|| PromptError::UnparseableResponse("no CORRECTED line".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn note(id: &str, text: &str) -> ClinicalNote {
        ClinicalNote::from_numbered(id, text).unwrap()
    }

    fn target() -> ClinicalNote {
        note(
            "target",
            "0 A 60-year-old man has a productive cough.\n1 He is treated with oral amoxicillin.",
        )
    }

    fn example(id: &str, a: ErrorAnnotation, reason: Option<&str>) -> IclExample {
        IclExample {
            note: note(
                id,
                &format!("0 Note {id} first sentence.\n1 Note {id} second sentence."),
            ),
            annotation: a,
            reason: reason.map(str::to_string),
        }
    }

    #[test]
    fn zero_shot_detect_has_instructions_and_note_only() {
        let set = TemplateSet::builtin();
        let p = set
            .render(TemplateName::StandardDetect, &target(), &[], &BTreeMap::new())
            .unwrap();
        assert!(p.contains("0 A 60-year-old man has a productive cough.\n1 He is treated"));
        assert!(!p.contains("Example 1"));
        assert!(!p.contains("{{"));
    }

    #[test]
    fn reason_icl_includes_every_reason_in_order() {
        let set = TemplateSet::builtin();
        let exs = vec![
            example("e1", ErrorAnnotation::no_error(), Some("Reason one about sepsis.")),
            example(
                "e2",
                ErrorAnnotation::error(1, "Fixed two."),
                Some("Reason two about dosing."),
            ),
            example("e3", ErrorAnnotation::no_error(), Some("Reason three about asthma.")),
            example(
                "e4",
                ErrorAnnotation::error(0, "Fixed four."),
                Some("Reason four about anemia."),
            ),
        ];
        let p = set
            .render(TemplateName::ReasonIcl, &target(), &exs, &BTreeMap::new())
            .unwrap();
        let positions: Vec<usize> = ["Reason one", "Reason two", "Reason three", "Reason four"]
            .iter()
            .map(|r| p.find(r).unwrap_or_else(|| panic!("{r} missing")))
            .collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
        assert!(p.contains("CORRECTED: Fixed two."));
        let target_pos = p.find("He is treated with oral amoxicillin").unwrap();
        assert!(target_pos > positions[3]);
    }

    #[test]
    fn reason_icl_rejects_example_without_reason() {
        let set = TemplateSet::builtin();
        let exs = vec![example("e1", ErrorAnnotation::no_error(), None)];
        assert_eq!(
            set.render(TemplateName::ReasonIcl, &target(), &exs, &BTreeMap::new()),
            Err(PromptError::ReasonMissing("e1".into()))
        );
    }

    #[test]
    fn correction_requires_sentence_id() {
        let set = TemplateSet::builtin();
        let err = set
            .render(TemplateName::Correction, &target(), &[], &BTreeMap::new())
            .unwrap_err();
        assert!(matches!(err, PromptError::UnboundPlaceholder { name, .. } if name == "sentence_id"));
        let extra = BTreeMap::from([("sentence_id".to_string(), "1".to_string())]);
        let p = set.render(TemplateName::Correction, &target(), &[], &extra).unwrap();
        assert!(p.contains("error in sentence 1"));
        let bad = BTreeMap::from([("sentence_id".to_string(), "9".to_string())]);
        assert!(matches!(
            set.render(TemplateName::Correction, &target(), &[], &bad),
            Err(PromptError::Precondition(_))
        ));
    }

    #[test]
    fn unknown_placeholder_is_unbound() {
        let set = TemplateSet::builtin().with_template(
            PromptTemplate::new(TemplateName::StandardDetect, "{{examples}}{{note}} {{mystery}}").unwrap(),
        );
        let err = set
            .render(TemplateName::StandardDetect, &target(), &[], &BTreeMap::new())
            .unwrap_err();
        assert!(matches!(err, PromptError::UnboundPlaceholder { name, .. } if name == "mystery"));
    }

    #[test]
    fn note_must_follow_examples() {
        assert!(PromptTemplate::new(TemplateName::StandardDetect, "{{note}} {{examples}}").is_err());
        assert!(PromptTemplate::new(TemplateName::StandardDetect, "no note here").is_err());
    }

    #[test]
    fn bound_values_are_not_re_expanded() {
        let set = TemplateSet::builtin();
        let n = note("x", "0 Literal {{examples}} in text.");
        let p = set
            .render(TemplateName::StandardDetect, &n, &[], &BTreeMap::new())
            .unwrap();
        assert!(p.contains("0 Literal {{examples}} in text."));
    }

    #[test]
    fn render_is_deterministic() {
        let set = TemplateSet::builtin();
        let exs = vec![example("e1", ErrorAnnotation::error(0, "F."), None)];
        let a = set
            .render(TemplateName::CotDiagnosis, &target(), &exs, &BTreeMap::new())
            .unwrap();
        let b = set
            .render(TemplateName::CotDiagnosis, &target(), &exs, &BTreeMap::new())
            .unwrap();
        assert_eq!(a, b);
        assert!(a.contains("ERROR: yes\nSENTENCE_ID: 0\n"));
        assert!(!a.contains("CORRECTED: F."), "detection examples carry no correction");
    }

    #[test]
    fn reason_request_for_incorrect_note_includes_correction() {
        let set = TemplateSet::builtin();
        let a = ErrorAnnotation::error(1, "He is treated with oral doxycycline.");
        let p = set.render_reason_request(&target(), &a).unwrap();
        assert!(p.contains("He is treated with oral doxycycline."));
        assert!(p.contains("1 He is treated with oral amoxicillin."));
        assert!(p.contains("medically incorrect"));
    }

    #[test]
    fn reason_request_for_correct_note_asks_for_validation() {
        let set = TemplateSet::builtin();
        let p = set
            .render_reason_request(&target(), &ErrorAnnotation::no_error())
            .unwrap();
        assert!(p.contains("clinical characteristics that validate"));
        assert!(!p.contains("Corrected sentence"));
    }

    #[test]
    fn reason_request_needs_complete_annotation() {
        let set = TemplateSet::builtin();
        let a = ErrorAnnotation {
            error_flag: true,
            error_sentence_id: Some(1),
            corrected_sentence: None,
        };
        assert!(matches!(
            set.render_reason_request(&target(), &a),
            Err(PromptError::Precondition(_))
        ));
    }

    #[test]
    fn parses_no() {
        assert_eq!(parse_verdict("ERROR: no").unwrap(), Verdict::no_error(""));
    }

    #[test]
    fn parses_full_answer() {
        let v = parse_verdict("ERROR: yes\nSENTENCE_ID: 7\nCORRECTED: He was given amoxicillin.").unwrap();
        assert_eq!(v, Verdict::error(7, Some("He was given amoxicillin.".into()), ""));
    }

    #[test]
    fn prose_only_is_unparseable() {
        assert!(matches!(
            parse_verdict("The note looks fine to me."),
            Err(PromptError::UnparseableResponse(_))
        ));
    }

    #[test]
    fn tolerates_prose_case_and_inline_keys() {
        let text = "Let me think.\nThe drug is wrong; error: this is prose.\n**Error:** Yes sentence_id: 3\nSENTENCE_ID: 9\nDone.";
        assert_eq!(parse_verdict(text).unwrap(), Verdict::error(3, None, ""));
        assert_eq!(parse_verdict("- error : NO.").unwrap(), Verdict::no_error(""));
    }

    #[test]
    fn yes_without_id_is_unparseable() {
        assert!(parse_verdict("ERROR: yes").is_err());
        assert!(parse_verdict("ERROR: yes\nSENTENCE_ID: three").is_err());
        assert!(parse_verdict("ERROR: maybe").is_err());
    }

    #[test]
    fn correction_parser_takes_first_payload() {
        let text = "Reasoning...\nThe fix:\nCORRECTED: He received ceftriaxone.\nCORRECTED: other";
        assert_eq!(parse_correction(text).unwrap(), "He received ceftriaxone.");
        assert!(parse_correction("nothing").is_err());
    }

    fn sentence_text() -> impl Strategy<Value = String> {
        "[A-Za-z0-9][A-Za-z0-9 ,.;()/-]{0,60}[A-Za-z0-9.)]".prop_filter("NA is reserved", |s| s != "NA")
    }

    proptest! {
        #[test]
        fn parse_inverts_format(
            flag in any::<bool>(),
            id in 0usize..200,
            corrected in proptest::option::of(sentence_text()),
        ) {
            let v = if flag { Verdict::error(id, corrected, "") } else { Verdict::no_error("") };
            prop_assert_eq!(parse_verdict(&format_verdict(&v)).unwrap(), v);
        }
    }
}
