//! Run configuration: one JSON document, `${VAR}` interpolated from the
//! environment before parsing. Relative paths resolve against the config
//! file's directory.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use medcorr_core::cot::CascadeConfig;
use medcorr_core::digest::sha256_hex;
use medcorr_core::llm::{GenerationConfig, LiveConfig};
use medcorr_core::retrieval::{EmbedOptions, RetrievalConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendMode {
    Live,
    Mock,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub mode: BackendMode,
    /// Recorded session served in replay mode.
    pub session: Option<PathBuf>,
    /// When set in live or mock mode, every exchange is appended to this session.
    pub record: Option<PathBuf>,
    /// Mock script (rules and default response) used in mock mode.
    pub mock_script: Option<PathBuf>,
    pub live: LiveConfig,
    pub generation: GenerationConfig,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            mode: BackendMode::Mock,
            session: None,
            record: None,
            mock_script: None,
            live: LiveConfig::default(),
            generation: GenerationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    /// Local feature hashing; needs no service.
    Hashing,
    /// OpenAI-compatible `/embeddings` endpoint.
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub kind: EmbedderKind,
    pub dim: usize,
    pub base_url: Option<String>,
    pub model: Option<String>,
    pub requests_per_minute: Option<u32>,
    /// Embedding cache; defaults to `<out>/embeddings.jsonl`.
    pub cache: Option<PathBuf>,
    pub options: EmbedOptions,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            kind: EmbedderKind::Hashing,
            dim: 256,
            base_url: None,
            model: None,
            requests_per_minute: None,
            cache: None,
            options: EmbedOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Annotated training split: retrieval pool and reason-bank source.
    pub train: Option<PathBuf>,
    /// Notes to process.
    pub eval: Option<PathBuf>,
    /// Dataset label used in reports.
    pub eval_name: String,
    pub backend: BackendConfig,
    pub embeddings: EmbeddingConfig,
    /// Example selection for the reason method.
    pub retrieval: RetrievalConfig,
    pub cascade: CascadeConfig,
    pub seed: u64,
    /// Directory holding prompt template overrides.
    pub prompts: Option<PathBuf>,
    /// Neural scoring service for BERTScore and BLEURT.
    pub scorer_url: Option<String>,
    #[serde(skip_serializing)]
    pub out: PathBuf,
    #[serde(skip_serializing)]
    pub jobs: usize,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: None,
            eval: None,
            eval_name: "MS_VAL".into(),
            backend: BackendConfig::default(),
            embeddings: EmbeddingConfig::default(),
            retrieval: RetrievalConfig::default(),
            cascade: CascadeConfig::default(),
            seed: 42,
            prompts: None,
            scorer_url: None,
            out: PathBuf::from("out"),
            jobs: 4,
            base_dir: PathBuf::from("."),
        }
    }
}

/// Replaces every `${NAME}` with the value of environment variable `NAME`.
pub fn interpolate(text: &str, lookup: impl Fn(&str) -> Option<String>) -> Result<String> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after.find('}').with_context(|| {
            format!(
                "unterminated ${{ in config near {:?}",
                &rest[start..rest.len().min(start + 20)]
            )
        })?;
        let name = &after[..end];
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            bail!("invalid variable name {name:?} in config");
        }
        let value = lookup(name).with_context(|| format!("environment variable {name} is not set"))?;
        out.push_str(&value);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let text = interpolate(&raw, |k| std::env::var(k).ok())?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        if cfg.base_dir.as_os_str().is_empty() {
            cfg.base_dir = PathBuf::from(".");
        }
        Ok(cfg)
    }

    /// Resolves a configured path against the config file's directory.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.out)
    }

    /// Hash of every setting that can change outputs. Paths are hashed as
    /// written, so the hash does not depend on where the repository lives;
    /// `out` and `jobs` are excluded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        sha256_hex(json)[..16].to_string()
    }

    pub fn validate(&self) -> Result<()> {
        self.retrieval.validate()?;
        self.cascade.validate()?;
        if self.jobs == 0 {
            bail!("jobs must be at least 1");
        }
        match self.backend.mode {
            BackendMode::Replay if self.backend.session.is_none() => {
                bail!("backend.mode = replay needs backend.session")
            }
            BackendMode::Replay if self.backend.record.is_some() => {
                bail!("backend.record cannot be combined with replay mode")
            }
            _ => {}
        }
        if self.embeddings.kind == EmbedderKind::Http && self.embeddings.base_url.is_none() {
            bail!("embeddings.kind = http needs embeddings.base_url");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolation_replaces_known_variables() {
        let lookup = |k: &str| (k == "KEY").then(|| "s3cret".to_string());
        assert_eq!(interpolate("a ${KEY} b", lookup).unwrap(), "a s3cret b");
        assert!(interpolate("${MISSING}", lookup).is_err());
        assert!(interpolate("${KEY", lookup).is_err());
        assert_eq!(interpolate("no vars $ here", lookup).unwrap(), "no vars $ here");
    }

    #[test]
    fn hash_ignores_out_and_jobs() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out = PathBuf::from("elsewhere");
        b.jobs = 16;
        b.base_dir = PathBuf::from("/x");
        assert_eq!(a.hash(), b.hash());
        b.seed = 7;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sead": 1}"#).is_err());
        let c: RunConfig =
            serde_json::from_str(r#"{"seed": 1, "backend": {"mode": "replay", "session": "s.jsonl"}}"#).unwrap();
        assert_eq!(c.backend.mode, BackendMode::Replay);
        assert!(c.validate().is_ok());
    }
}
