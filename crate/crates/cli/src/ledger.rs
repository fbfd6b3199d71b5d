//! Per-run append-only ledger under `ledger/<run_id>/`.

use std::collections::BTreeSet;
use std::fs;
use std::path::PathBuf;

use cotrel::reasoner::{ReasoningMode, ReasoningTrace};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::workspace::{append_lines, read_lines, write_atomic, Workspace};

pub const MANIFEST: &str = "manifest.json";
pub const CORPUS: &str = "corpus.jsonl";
pub const ASSIGNMENTS: &str = "assignments.jsonl";
pub const TRACES: &str = "traces.jsonl";
pub const VERDICTS: &str = "verdicts.jsonl";
pub const DETECTION: &str = "detection.json";
pub const ROUNDS: &str = "rounds.jsonl";
pub const STAGES: &str = "stages.jsonl";
pub const REFINE_TRACES: &str = "refine_traces.jsonl";
pub const REFINE_DETECTION: &str = "refine_detection.jsonl";

/// Common fields on every ledger line, with the payload nested under `record`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub run_id: String,
    pub generation: u32,
    pub config_digest: String,
    pub timestamp: String,
    pub record: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceKind {
    /// A stage's own reasoning run.
    Primary,
    /// A realignment rerun made during detection.
    Rerun,
    /// A multi-step run made during refinement.
    Refine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub trace_id: String,
    pub kind: TraceKind,
    /// For refinement traces: whether the trace precedes or follows the
    /// generation's template changes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<Phase>,
    #[serde(flatten)]
    pub trace: ReasoningTrace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Before,
    After,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub run_id: String,
    pub config_digest: String,
    pub created: String,
    pub config: serde_json::Value,
}

pub struct RunLedger {
    dir: PathBuf,
    run_id: String,
    digest: String,
    deterministic: bool,
}

impl RunLedger {
    /// Opens (creating when new) the ledger of a run. A recorded digest that
    /// differs from `digest` is an error.
    pub fn open(
        ws: &Workspace,
        run_id: &str,
        digest: &str,
        config: serde_json::Value,
        deterministic: bool,
    ) -> Result<Self, CliError> {
        let dir = ws.ledger_dir(run_id);
        fs::create_dir_all(&dir).map_err(CliError::io(&dir))?;
        let ledger = Self {
            dir,
            run_id: run_id.to_string(),
            digest: digest.to_string(),
            deterministic,
        };
        let manifest_path = ledger.path(MANIFEST);
        if manifest_path.exists() {
            let text = fs::read_to_string(&manifest_path).map_err(CliError::io(&manifest_path))?;
            let m: Manifest = serde_json::from_str(&text)?;
            if m.config_digest != digest {
                return Err(CliError::ConfigMismatch {
                    run_id: run_id.to_string(),
                    expected: m.config_digest,
                    found: digest.to_string(),
                });
            }
        } else {
            let m = Manifest {
                run_id: run_id.to_string(),
                config_digest: digest.to_string(),
                created: ledger.timestamp(),
                config,
            };
            write_atomic(&manifest_path, serde_json::to_string_pretty(&m)?.as_bytes())?;
        }
        Ok(ledger)
    }

    /// Reopens a run created earlier, taking its digest from the manifest.
    /// Returns `None` when the run has no ledger.
    pub fn existing(ws: &Workspace, run_id: &str) -> Result<Option<Self>, CliError> {
        let dir = ws.ledger_dir(run_id);
        let manifest_path = dir.join(MANIFEST);
        if !manifest_path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&manifest_path).map_err(CliError::io(&manifest_path))?;
        let m: Manifest = serde_json::from_str(&text)?;
        let deterministic = m.config.pointer("/backend/kind").and_then(|v| v.as_str()) == Some("scripted");
        Ok(Some(Self {
            dir,
            run_id: m.run_id,
            digest: m.config_digest,
            deterministic,
        }))
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn dir(&self) -> &std::path::Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn exists(&self, name: &str) -> bool {
        self.path(name).exists()
    }

    pub fn timestamp(&self) -> String {
        if self.deterministic {
            "1970-01-01T00:00:00Z".into()
        } else {
            chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
        }
    }

    pub fn append<T: Serialize>(&self, name: &str, generation: u32, records: impl IntoIterator<Item = T>) -> Result<(), CliError> {
        let ts = self.timestamp();
        append_lines(
            &self.path(name),
            records.into_iter().map(|record| Envelope {
                run_id: self.run_id.clone(),
                generation,
                config_digest: self.digest.clone(),
                timestamp: ts.clone(),
                record,
            }),
        )
    }

    pub fn read<T: DeserializeOwned>(&self, name: &str) -> Result<Vec<Envelope<T>>, CliError> {
        let p = self.path(name);
        if !p.exists() {
            return Ok(Vec::new());
        }
        read_lines(&p)
    }

    pub fn stage_done(&self, stage: &str) -> Result<bool, CliError> {
        Ok(self.read::<StageRecord>(STAGES)?.iter().any(|r| r.record.stage == stage))
    }

    pub fn mark_done(&self, stage: &str) -> Result<(), CliError> {
        self.append(STAGES, 0, [StageRecord { stage: stage.into() }])
    }

    /// Stored traces of one kind and mode, in ledger order.
    pub fn traces(&self, kind: TraceKind, mode: ReasoningMode) -> Result<Vec<Envelope<TraceRecord>>, CliError> {
        Ok(self
            .read::<TraceRecord>(TRACES)?
            .into_iter()
            .filter(|e| e.record.kind == kind && e.record.trace.mode == mode)
            .collect())
    }

    pub fn traced_ids(&self, kind: TraceKind, mode: ReasoningMode) -> Result<BTreeSet<String>, CliError> {
        Ok(self
            .traces(kind, mode)?
            .into_iter()
            .map(|e| e.record.trace.sample_id)
            .collect())
    }
}

pub fn trace_id(trace: &ReasoningTrace, kind: TraceKind, generation: u32) -> String {
    let mode = match trace.mode {
        ReasoningMode::Direct => "direct",
        ReasoningMode::Multistep => "multistep",
    };
    match kind {
        TraceKind::Primary => format!("{}:{mode}", trace.sample_id),
        TraceKind::Rerun => format!("{}:rerun:{mode}", trace.sample_id),
        TraceKind::Refine => format!("{}:g{generation}:{mode}", trace.sample_id),
    }
}
