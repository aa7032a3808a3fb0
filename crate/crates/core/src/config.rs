//! Pipeline configuration: one TOML file, overridable field by field from the
//! command line. Relative paths resolve against the config file's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::MentionFormat;
use crate::distillgen::FilterPolicy;
use crate::embedstore::sha256_hex;
use crate::retriever::{Metric, DEFAULT_HARD_RATIO, DEFAULT_K, DEFAULT_NEGATIVES};
use crate::teacher::{DEFAULT_MAX_OUTPUT, DEFAULT_TEMPERATURE};
use crate::{Error, Result};

pub const DEFAULT_CONTEXT_CHARS: usize = 256;
pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_PARALLELISM: usize = 4;
pub const DEFAULT_API_KEY_ENV: &str = "OPENAI_API_KEY";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub kb: Option<PathBuf>,
    pub train_mentions: Option<PathBuf>,
    pub val_mentions: Option<PathBuf>,
    pub test_mentions: Option<PathBuf>,
    pub mention_format: MentionFormat,
    pub entity_embeddings: Option<PathBuf>,
    pub mention_embeddings: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub teacher_template: Option<PathBuf>,
    pub student_template: Option<PathBuf>,
    pub prices: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub k: usize,
    pub metric: Metric,
    pub negatives: usize,
    pub hard_ratio: f64,
    pub seed: u64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            metric: Metric::Dot,
            negatives: DEFAULT_NEGATIVES,
            hard_ratio: DEFAULT_HARD_RATIO,
            seed: DEFAULT_SEED,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub teacher_model: String,
    /// Base URL of the chat-completion endpoint for `--backend remote`.
    pub endpoint: Option<String>,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub temperature: f32,
    pub max_output: u32,
    pub limit: Option<usize>,
    pub filter_policy: FilterPolicy,
    pub parallelism: usize,
    /// Requests per second; unlimited when absent.
    pub rate_limit: Option<u32>,
    pub context_chars: usize,
    /// Whether prompts carry the mention context.
    pub include_context: bool,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            teacher_model: "gpt-3.5-turbo-0125".into(),
            endpoint: None,
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            temperature: DEFAULT_TEMPERATURE,
            max_output: DEFAULT_MAX_OUTPUT,
            limit: None,
            filter_policy: FilterPolicy::default(),
            parallelism: DEFAULT_PARALLELISM,
            rate_limit: None,
            context_chars: DEFAULT_CONTEXT_CHARS,
            include_context: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub acc_ks: Vec<usize>,
    /// Exclude mentions whose gold id is not in the KB from the denominators.
    pub strict_gold: bool,
    pub student_model: String,
    pub student_endpoint: Option<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            acc_ks: vec![1, 5],
            strict_gold: false,
            student_model: "student".into(),
            student_endpoint: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub retrieval: RetrievalConfig,
    pub generation: GenerationConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(base) = path.parent() {
            cfg.paths.resolve_against(base);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.retrieval.k == 0 {
            return bad("retrieval.k must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.retrieval.hard_ratio) {
            return bad(format!("retrieval.hard_ratio must be in [0, 1], got {}", self.retrieval.hard_ratio));
        }
        if !(self.generation.temperature >= 0.0 && self.generation.temperature.is_finite()) {
            return bad(format!("generation.temperature must be >= 0, got {}", self.generation.temperature));
        }
        if self.generation.limit == Some(0) {
            return bad("generation.limit must be >= 1".into());
        }
        if self.generation.parallelism == 0 {
            return bad("generation.parallelism must be >= 1".into());
        }
        if self.generation.rate_limit == Some(0) {
            return bad("generation.rate_limit must be >= 1".into());
        }
        if self.generation.context_chars == 0 {
            return bad("generation.context_chars must be >= 1".into());
        }
        if self.eval.acc_ks.is_empty() || self.eval.acc_ks.contains(&0) {
            return bad("eval.acc_ks must be a non-empty list of values >= 1".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form; echoed in reports.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

impl Paths {
    fn resolve_against(&mut self, base: &Path) {
        for p in [
            &mut self.kb,
            &mut self.train_mentions,
            &mut self.val_mentions,
            &mut self.test_mentions,
            &mut self.entity_embeddings,
            &mut self.mention_embeddings,
            &mut self.cache_dir,
            &mut self.teacher_template,
            &mut self.student_template,
            &mut self.prices,
            &mut self.out_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

/// Returns the path for `field`, failing with a message that names the field
/// when it is unset or does not exist.
pub fn require_existing<'a>(field: &str, value: &'a Option<PathBuf>) -> Result<&'a Path> {
    let p = require_set(field, value)?;
    if !p.exists() {
        return Err(Error::Config(format!("{field}: {} does not exist", p.display())));
    }
    Ok(p)
}

/// Like [`require_existing`] for outputs: only the field must be set.
pub fn require_set<'a>(field: &str, value: &'a Option<PathBuf>) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Error::Config(format!("{field} is not set (config file or flag)")))
}
