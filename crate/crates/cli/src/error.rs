use std::path::PathBuf;

use cotrel::backend::BackendError;
use cotrel::corpus::CorpusError;
use cotrel::cot::CotError;
use cotrel::fpdetect::FpError;
use cotrel::metrics::MetricsError;
use cotrel::reasoner::ReasonerError;
use cotrel::refine::RefineError;
use cotrel::taxonomy::TaxonomyError;
use thiserror::Error;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const DATA: i32 = 3;
    pub const BACKEND: i32 = 4;
    pub const UPSTREAM_MISSING: i32 = 5;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("workspace already initialized at {0} (use --force to regenerate)")]
    WorkspaceExists(PathBuf),
    #[error("config digest {found} differs from the digest {expected} recorded for run `{run_id}`")]
    ConfigMismatch {
        run_id: String,
        expected: String,
        found: String,
    },
    #[error("workspace is locked by another command ({0})")]
    Locked(PathBuf),
    #[error("usage: {0}")]
    Usage(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("backend error: {0}")]
    Backend(String),
    #[error("upstream stage missing: run `{0}` first")]
    UpstreamMissing(&'static str),
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_)
            | CliError::WorkspaceExists(_)
            | CliError::ConfigMismatch { .. }
            | CliError::Locked(_)
            | CliError::Usage(_) => exit::CONFIG,
            CliError::Data(_) | CliError::Io { .. } => exit::DATA,
            CliError::Backend(_) => exit::BACKEND,
            CliError::UpstreamMissing(_) => exit::UPSTREAM_MISSING,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        match e {
            BackendError::Config(_) | BackendError::Script { .. } | BackendError::DuplicateScriptEntry { .. } => {
                CliError::Config(e.to_string())
            }
            other => CliError::Backend(other.to_string()),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TaxonomyError> for CliError {
    fn from(e: TaxonomyError) -> Self {
        match e {
            TaxonomyError::ClassificationUnavailable(_) => CliError::Backend(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<CotError> for CliError {
    fn from(e: CotError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<FpError> for CliError {
    fn from(e: FpError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ReasonerError> for CliError {
    fn from(e: ReasonerError) -> Self {
        match e {
            ReasonerError::Backend(b) => b.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<RefineError> for CliError {
    fn from(e: RefineError) -> Self {
        match e {
            RefineError::Backend(b) => b.into(),
            RefineError::Reasoner(r) => r.into(),
            RefineError::ReviewConflict { .. } => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
