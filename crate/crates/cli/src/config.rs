//! Run configuration file (TOML) and its digest.

use std::fs;
use std::path::{Path, PathBuf};

use cotrel::backend::{BackendConfig, BackendKind};
use cotrel::corpus::{Dataset, Split};
use cotrel::fpdetect::{DetectConfig, PathMode, TnDefinition};
use cotrel::metrics::MatchScheme;
use cotrel::reasoner::ReasonerConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub dataset: Dataset,
    /// Split recorded for the A-OKVQA loader; the other loaders fix their own.
    #[serde(default = "default_split")]
    pub split: Split,
    /// AOKVQA, FVQA and SYNTHETIC take one file; OKVQA takes questions then annotations.
    pub paths: Vec<PathBuf>,
}

fn default_split() -> Split {
    Split::Val
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifyMode {
    #[default]
    Backend,
    Rule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReasoningConfig {
    pub scheme: MatchScheme,
    pub tau: f64,
    pub answer_word_limit: usize,
    pub top_k: Option<usize>,
    pub path_mode: PathMode,
    pub classify: ClassifyMode,
    pub parallelism: usize,
}

impl Default for ReasoningConfig {
    fn default() -> Self {
        Self {
            scheme: MatchScheme::ExactNorm,
            tau: 1.0,
            answer_word_limit: 3,
            top_k: None,
            path_mode: PathMode::Rule,
            classify: ClassifyMode::Backend,
            parallelism: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineConfig {
    pub budget: u32,
    pub auto_accept: bool,
    pub analyze: bool,
    pub tn_definition: TnDefinition,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            budget: 2,
            auto_accept: false,
            analyze: true,
            tn_definition: TnDefinition::RecoveredPlusStable,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    pub data: DataConfig,
    pub backend: BackendConfig,
    #[serde(default)]
    pub reasoning: ReasoningConfig,
    #[serde(default)]
    pub refine: RefineConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    /// Digest taken before relative paths were resolved, so a workspace
    /// keeps its run identity when moved.
    #[serde(skip)]
    written_digest: Option<String>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub run_id: Option<String>,
    pub budget: Option<u32>,
    pub auto_accept: bool,
    pub tau: Option<f64>,
    pub scheme: Option<MatchScheme>,
    pub parallelism: Option<usize>,
}

pub const DEFAULT_CONFIG: &str = r#"# cotrel run configuration. Relative paths resolve against this file's directory.
run_id = "run-1"

[data]
# AOKVQA | OKVQA | FVQA | SYNTHETIC
dataset = "SYNTHETIC"
split = "VAL"
paths = ["data/synthetic.jsonl"]

[backend]
# "scripted" replays script.jsonl; "http" calls an OpenAI-compatible endpoint.
kind = "scripted"
model_name = "scripted"
script = "script.jsonl"
# kind = "http"
# base_url = "https://api.openai.com/v1"
# model_name = "gpt-4o"
# api_key_env = "OPENAI_API_KEY"
temperature = 0.0

[reasoning]
scheme = "exact_norm"   # exact_norm | choice | topK (e.g. top3) | soft3
tau = 1.0               # 1.0 = exact path equality; e.g. 0.8 = Jaccard threshold
answer_word_limit = 3
path_mode = "rule"      # rule | backend
classify = "backend"    # backend | rule
parallelism = 4

[refine]
budget = 2
auto_accept = false
analyze = true
tn_definition = "recovered_plus_stable"   # or "recovered_only"

# cache_dir = "cache"
"#;

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads the file, applies overrides, resolves relative paths against
    /// `root` and validates the result.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        cfg.apply(overrides);
        cfg.written_digest = Some(cfg.digest());
        let root = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(root);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        self.written_digest = None;
        if let Some(v) = &o.run_id {
            self.run_id = v.clone();
        }
        if let Some(v) = o.budget {
            self.refine.budget = v;
        }
        if o.auto_accept {
            self.refine.auto_accept = true;
        }
        if let Some(v) = o.tau {
            self.reasoning.tau = v;
        }
        if let Some(v) = o.scheme {
            self.reasoning.scheme = v;
        }
        if let Some(v) = o.parallelism {
            self.reasoning.parallelism = v;
        }
    }

    fn resolve_paths(&mut self, root: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = root.join(&*p);
            }
        };
        self.data.paths.iter_mut().for_each(fix);
        self.backend.script.as_mut().map(fix);
        self.backend.image_root.as_mut().map(fix);
        self.cache_dir.as_mut().map(fix);
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.run_id.is_empty() || !self.run_id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
            return bad(format!("run_id `{}` must be non-empty and use [A-Za-z0-9._-]", self.run_id));
        }
        let expected = if self.data.dataset == Dataset::Okvqa { 2 } else { 1 };
        if self.data.paths.len() != expected {
            return bad(format!("{} expects {expected} data path(s)", self.data.dataset));
        }
        for p in &self.data.paths {
            if !p.exists() {
                return bad(format!("data path {} does not exist", p.display()));
            }
        }
        if let (BackendKind::Scripted, Some(s)) = (self.backend.kind, &self.backend.script) {
            if !s.exists() {
                return bad(format!("script {} does not exist", s.display()));
            }
        }
        self.backend.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.reasoning.tau) {
            return bad(format!("tau {} outside [0, 1]", self.reasoning.tau));
        }
        if self.reasoning.parallelism == 0 {
            return bad("parallelism must be at least 1".into());
        }
        if self.reasoning.answer_word_limit == 0 {
            return bad("answer_word_limit must be at least 1".into());
        }
        if self.reasoning.scheme == MatchScheme::Choice && !self.data.dataset.provides_choices() {
            return bad(format!("scheme `choice` needs a dataset with options, not {}", self.data.dataset));
        }
        Ok(())
    }

    /// SHA-256 over the effective configuration.
    pub fn digest(&self) -> String {
        if let Some(d) = &self.written_digest {
            return d.clone();
        }
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// Scripted runs use fixed timestamps so their ledgers are reproducible.
    pub fn deterministic(&self) -> bool {
        self.backend.kind == BackendKind::Scripted
    }

    pub fn reasoner(&self) -> ReasonerConfig {
        ReasonerConfig {
            answer_word_limit: self.reasoning.answer_word_limit,
            top_k: self.reasoning.top_k,
        }
    }

    pub fn detect(&self) -> DetectConfig {
        DetectConfig {
            tau: self.reasoning.tau,
            scheme: self.reasoning.scheme,
            tn_definition: self.refine.tn_definition,
            path_mode: self.reasoning.path_mode,
            reasoner: self.reasoner(),
            parallelism: self.reasoning.parallelism,
        }
    }
}
