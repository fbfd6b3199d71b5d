//! Chat-completion backends.
//!
//! Every request the harness issues is a list of [`ChatTurn`]s whose SYSTEM
//! turn starts with a routing header (see [`Route`]). The HTTP backend strips
//! it before sending; the scripted backend resolves responses from it. No
//! other module performs network I/O.

mod cache;
mod http;
mod scripted;

use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{CacheEntry, CacheKey, CachedBackend, ResponseCache};
pub use http::HttpBackend;
pub use scripted::{ScriptEntry, ScriptedBackend};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend unavailable after {attempts} attempt(s): {last}")]
    Unavailable { attempts: u32, last: String },
    #[error("backend rejected request with HTTP {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    Protocol(String),
    #[error("no scripted response for sample `{sample_id}` stage `{stage}`")]
    ScriptMiss { sample_id: String, stage: String },
    #[error("duplicate script entry for sample `{sample_id}` stage `{stage}`")]
    DuplicateScriptEntry { sample_id: String, stage: String },
    #[error("script {path}: line {line}: {message}")]
    Script {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid backend configuration: {0}")]
    Config(String),
    #[error("cannot attach image `{image_ref}`: {message}")]
    Image { image_ref: String, message: String },
}

impl BackendError {
    /// Failures that mean "the model could not be reached", as opposed to a
    /// malformed request.
    pub fn is_unavailable(&self) -> bool {
        matches!(
            self,
            BackendError::Unavailable { .. } | BackendError::ScriptMiss { .. } | BackendError::Protocol(_)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn wire_name(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatTurn {
    pub role: Role,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
}

impl ChatTurn {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
            image_ref: None,
        }
    }

    pub fn user(content: impl Into<String>, image_ref: Option<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
            image_ref,
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
            image_ref: None,
        }
    }
}

/// Checks the request-shape preconditions shared by all backends.
pub fn validate_turns(turns: &[ChatTurn]) -> Result<(), BackendError> {
    let last = turns
        .last()
        .ok_or_else(|| BackendError::InvalidRequest("empty turn list".into()))?;
    if last.role != Role::User {
        return Err(BackendError::InvalidRequest("last turn must be USER".into()));
    }
    for (i, t) in turns.iter().enumerate() {
        if t.image_ref.is_some() && t.role != Role::User {
            return Err(BackendError::InvalidRequest(format!("turn {i}: image on non-USER turn")));
        }
        if t.content.trim().is_empty() && t.image_ref.is_none() {
            return Err(BackendError::InvalidRequest(format!("turn {i}: empty content")));
        }
    }
    Ok(())
}

const ROUTE_PREFIX: &str = "#route ";

/// (sample_id, stage_key) routing tag carried on the first line of the SYSTEM turn.
///
/// Stage keys are short strings such as `direct`, `classify`, `sq:od` or
/// `final`. A suffix introduced by `@` narrows a key (for example
/// `final@tid>sd` names the chain in use); scripted lookups fall back to the
/// key without it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Route {
    pub sample_id: String,
    pub stage: String,
}

impl Route {
    pub fn new(sample_id: impl Into<String>, stage: impl Into<String>) -> Self {
        Self {
            sample_id: sample_id.into(),
            stage: stage.into(),
        }
    }

    /// Prepends the routing line to a system prompt.
    pub fn header(&self, system_text: &str) -> String {
        let tag = serde_json::to_string(self).expect("route serializes");
        format!("{ROUTE_PREFIX}{tag}\n{system_text}")
    }

    /// Extracts the route from the first SYSTEM turn, if present.
    pub fn from_turns(turns: &[ChatTurn]) -> Option<Route> {
        let sys = turns.iter().find(|t| t.role == Role::System)?;
        let first = sys.content.lines().next()?;
        serde_json::from_str(first.strip_prefix(ROUTE_PREFIX)?).ok()
    }

    /// System content with the routing line removed.
    pub fn strip(content: &str) -> &str {
        if content.starts_with(ROUTE_PREFIX) {
            content.split_once('\n').map_or("", |(_, rest)| rest)
        } else {
            content
        }
    }

    /// The stage key without its `@` qualifier.
    pub fn base_stage(&self) -> &str {
        self.stage.split_once('@').map_or(&self.stage, |(base, _)| base)
    }
}

impl fmt::Display for Route {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.sample_id, self.stage)
    }
}

/// A chat-completion provider.
pub trait ChatBackend: Send + Sync {
    /// Returns the assistant message text for the conversation.
    fn complete(&self, turns: &[ChatTurn]) -> Result<String, BackendError>;

    fn model_name(&self) -> &str;

    fn temperature(&self) -> f64 {
        0.0
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for Arc<B> {
    fn complete(&self, turns: &[ChatTurn]) -> Result<String, BackendError> {
        (**self).complete(turns)
    }

    fn model_name(&self) -> &str {
        (**self).model_name()
    }

    fn temperature(&self) -> f64 {
        (**self).temperature()
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for &B {
    fn complete(&self, turns: &[ChatTurn]) -> Result<String, BackendError> {
        (**self).complete(turns)
    }

    fn model_name(&self) -> &str {
        (**self).model_name()
    }

    fn temperature(&self) -> f64 {
        (**self).temperature()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Scripted,
}

fn default_max_tokens() -> u32 {
    512
}
fn default_timeout_secs() -> u64 {
    60
}
fn default_max_retries() -> u32 {
    3
}
fn default_retry_base_ms() -> u64 {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    pub model_name: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// Initial backoff delay; doubles per retry.
    #[serde(default = "default_retry_base_ms")]
    pub retry_base_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    /// Script file for the scripted kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<PathBuf>,
    /// Directory that relative local image references resolve against.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_root: Option<PathBuf>,
}

impl BackendConfig {
    pub fn scripted(script: impl Into<PathBuf>) -> Self {
        Self {
            kind: BackendKind::Scripted,
            base_url: None,
            model_name: "scripted".into(),
            temperature: 0.0,
            max_tokens: default_max_tokens(),
            timeout_secs: default_timeout_secs(),
            max_retries: default_max_retries(),
            retry_base_ms: default_retry_base_ms(),
            api_key_env: None,
            script: Some(script.into()),
            image_root: None,
        }
    }

    pub fn http(base_url: impl Into<String>, model_name: impl Into<String>, api_key_env: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::Http,
            base_url: Some(base_url.into()),
            model_name: model_name.into(),
            temperature: 0.0,
            max_tokens: default_max_tokens(),
            timeout_secs: default_timeout_secs(),
            max_retries: default_max_retries(),
            retry_base_ms: default_retry_base_ms(),
            api_key_env: Some(api_key_env.into()),
            script: None,
            image_root: None,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(BackendError::Config("temperature must be >= 0".into()));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::Config("max_tokens must be positive".into()));
        }
        if self.model_name.trim().is_empty() {
            return Err(BackendError::Config("model_name is empty".into()));
        }
        match self.kind {
            BackendKind::Http => {
                if self.base_url.as_deref().is_none_or(|u| u.trim().is_empty()) {
                    return Err(BackendError::Config("http backend requires base_url".into()));
                }
                if self.api_key_env.as_deref().is_none_or(|u| u.trim().is_empty()) {
                    return Err(BackendError::Config("http backend requires api_key_env".into()));
                }
            }
            BackendKind::Scripted => {
                if self.script.is_none() {
                    return Err(BackendError::Config("scripted backend requires script".into()));
                }
            }
        }
        Ok(())
    }

    /// Instantiates the configured backend.
    pub fn build(&self) -> Result<Arc<dyn ChatBackend>, BackendError> {
        self.validate()?;
        Ok(match self.kind {
            BackendKind::Http => Arc::new(HttpBackend::from_config(self)?),
            BackendKind::Scripted => {
                let path = self.script.as_ref().expect("validated");
                Arc::new(ScriptedBackend::load(path)?.with_model_name(&self.model_name))
            }
        })
    }
}
