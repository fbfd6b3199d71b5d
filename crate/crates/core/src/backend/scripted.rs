use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::{validate_turns, BackendError, ChatBackend, ChatTurn, Route};

/// One line of a script file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub sample_id: String,
    pub stage_key: String,
    pub response_text: String,
}

/// Deterministic backend answering from a `(sample_id, stage_key)` table.
///
/// Lookup order for a route `(s, k@q)`: `(s, k@q)`, `(s, k)`, `(*, k@q)`,
/// `(*, k)`. A sample id of `*` therefore acts as a default for a stage.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    table: HashMap<(String, String), String>,
    model_name: String,
    calls: AtomicUsize,
}

impl ScriptedBackend {
    pub fn empty() -> Self {
        Self {
            table: HashMap::new(),
            model_name: "scripted".into(),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn from_script(entries: impl IntoIterator<Item = ScriptEntry>) -> Result<Self, BackendError> {
        let mut b = Self::empty();
        for e in entries {
            let key = (e.sample_id, e.stage_key);
            if b.table.contains_key(&key) {
                return Err(BackendError::DuplicateScriptEntry {
                    sample_id: key.0,
                    stage: key.1,
                });
            }
            b.table.insert(key, e.response_text);
        }
        Ok(b)
    }

    pub fn from_entries<'a>(entries: impl IntoIterator<Item = (&'a str, &'a str, &'a str)>) -> Result<Self, BackendError> {
        Self::from_script(entries.into_iter().map(|(s, k, r)| ScriptEntry {
            sample_id: s.into(),
            stage_key: k.into(),
            response_text: r.into(),
        }))
    }

    /// Reads a line-delimited script file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| BackendError::Script {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ScriptEntry = serde_json::from_str(line).map_err(|e| BackendError::Script {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            entries.push(entry);
        }
        Self::from_script(entries)
    }

    pub fn with_model_name(mut self, name: &str) -> Self {
        self.model_name = name.to_string();
        self
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    /// Number of `complete` calls served so far (hits and misses).
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn lookup(&self, route: &Route) -> Option<&str> {
        let base = route.base_stage();
        [
            (route.sample_id.as_str(), route.stage.as_str()),
            (route.sample_id.as_str(), base),
            ("*", route.stage.as_str()),
            ("*", base),
        ]
        .into_iter()
        .find_map(|(s, k)| self.table.get(&(s.to_string(), k.to_string())))
        .map(String::as_str)
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, turns: &[ChatTurn]) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        validate_turns(turns)?;
        let route = Route::from_turns(turns)
            .ok_or_else(|| BackendError::InvalidRequest("scripted backend requires a routing header".into()))?;
        self.lookup(&route)
            .map(str::to_string)
            .ok_or(BackendError::ScriptMiss {
                sample_id: route.sample_id,
                stage: route.stage,
            })
    }

    fn model_name(&self) -> &str {
        &self.model_name
    }
}
