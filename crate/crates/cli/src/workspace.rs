//! Workspace layout, initialization, locking and vocabulary persistence.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use cotrel::cot::TemplateRegistry;
use cotrel::refine::{RefineState, ReviewItem, ReviewQueue};
use cotrel::taxonomy::{QuestionType, SubQuestion, SubQuestionBank, Taxonomy};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::config::DEFAULT_CONFIG;
use crate::error::CliError;

pub const TAXONOMY: &str = "taxonomy.jsonl";
pub const SUBQUESTIONS: &str = "subquestions.jsonl";
pub const REGISTRY: &str = "registry.jsonl";
pub const REVIEW_QUEUE: &str = "review_queue.jsonl";
const LOCK: &str = ".cotrel.lock";
const BACKUP: &str = "backup";

/// Directory holding the config file, vocabularies, registry, ledgers and reports.
#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
}

/// Removes the lock file on drop.
#[derive(Debug)]
pub struct LockGuard(PathBuf);

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// What `init` produced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InitSummary {
    pub types: usize,
    pub sub_questions: usize,
    pub templates: usize,
    pub wrote_config: bool,
    pub backup: Option<PathBuf>,
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(CliError::io(&tmp))?;
    fs::rename(&tmp, path).map_err(CliError::io(path))
}

pub fn append_lines<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<(), CliError> {
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(&r)?);
        buf.push('\n');
    }
    if buf.is_empty() {
        return Ok(());
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(CliError::io(path))?;
    f.write_all(buf.as_bytes()).map_err(CliError::io(path))
}

pub fn read_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// Workspace of a config file: its parent directory.
    pub fn of_config(config: &Path) -> Self {
        let parent = config.parent().filter(|p| !p.as_os_str().is_empty());
        Self::new(parent.unwrap_or(Path::new(".")))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn ledger_dir(&self, run_id: &str) -> PathBuf {
        self.root.join("ledger").join(run_id)
    }

    pub fn report_dir(&self, run_id: &str) -> PathBuf {
        self.root.join("reports").join(run_id)
    }

    pub fn is_initialized(&self) -> bool {
        [TAXONOMY, SUBQUESTIONS, REGISTRY].iter().any(|f| self.path(f).exists())
    }

    /// Takes the single-command lock.
    pub fn lock(&self) -> Result<LockGuard, CliError> {
        fs::create_dir_all(&self.root).map_err(CliError::io(&self.root))?;
        let path = self.path(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(LockGuard(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked(path)),
            Err(e) => Err(CliError::io(path)(e)),
        }
    }

    /// Writes the builtin vocabularies, seed templates, an empty review queue
    /// and (when absent) a default config.
    pub fn init(&self, config: &Path, force: bool) -> Result<InitSummary, CliError> {
        let backup = if self.is_initialized() {
            if !force {
                return Err(CliError::WorkspaceExists(self.root.clone()));
            }
            Some(self.backup()?)
        } else {
            None
        };
        let wrote_config = !config.exists();
        if wrote_config {
            write_atomic(config, DEFAULT_CONFIG.as_bytes())?;
        }
        let taxonomy = Taxonomy::builtin();
        let bank = SubQuestionBank::builtin();
        let registry = TemplateRegistry::seeded(&taxonomy, &bank)?;
        let state = RefineState {
            taxonomy,
            bank,
            registry,
            review: ReviewQueue::default(),
        };
        self.save_state(&state)?;
        write_atomic(&self.path(REVIEW_QUEUE), b"")?;
        Ok(InitSummary {
            types: state.taxonomy.len(),
            sub_questions: state.bank.len(),
            templates: state.registry.active_types().count(),
            wrote_config,
            backup,
        })
    }

    fn backup(&self) -> Result<PathBuf, CliError> {
        let base = self.path(BACKUP);
        let mut n = 1;
        while base.join(n.to_string()).exists() {
            n += 1;
        }
        let dir = base.join(n.to_string());
        fs::create_dir_all(&dir).map_err(CliError::io(&dir))?;
        for f in [TAXONOMY, SUBQUESTIONS, REGISTRY, REVIEW_QUEUE] {
            let src = self.path(f);
            if src.exists() {
                fs::rename(&src, dir.join(f)).map_err(CliError::io(&src))?;
            }
        }
        Ok(dir)
    }

    fn require(&self, name: &str) -> Result<PathBuf, CliError> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(CliError::Config(format!(
                "{} missing; run `cotrel init` in {}",
                name,
                self.root.display()
            )))
        }
    }

    pub fn load_state(&self) -> Result<RefineState, CliError> {
        let types: Vec<QuestionType> = read_lines(&self.require(TAXONOMY)?)?;
        let sqs: Vec<SubQuestion> = read_lines(&self.require(SUBQUESTIONS)?)?;
        let taxonomy = Taxonomy::from_entries(types)?;
        let bank = SubQuestionBank::from_entries(sqs)?;
        let registry_text = fs::read_to_string(self.require(REGISTRY)?).map_err(CliError::io(self.path(REGISTRY)))?;
        let registry = TemplateRegistry::from_lines(&registry_text)?;
        registry.check(&bank, &taxonomy)?;
        let review_path = self.path(REVIEW_QUEUE);
        let review = if review_path.exists() {
            let text = fs::read_to_string(&review_path).map_err(CliError::io(&review_path))?;
            ReviewQueue::from_lines(&text)?
        } else {
            ReviewQueue::default()
        };
        Ok(RefineState {
            taxonomy,
            bank,
            registry,
            review,
        })
    }

    /// Rewrites the vocabulary and registry files. The review queue is
    /// append-only and written through [`Workspace::append_review`].
    pub fn save_state(&self, state: &RefineState) -> Result<(), CliError> {
        let lines = |items: Vec<String>| items.into_iter().map(|l| l + "\n").collect::<String>();
        let types = lines(state.taxonomy.types().iter().map(serde_json::to_string).collect::<Result<_, _>>()?);
        let sqs = lines(state.bank.entries().iter().map(serde_json::to_string).collect::<Result<_, _>>()?);
        write_atomic(&self.path(TAXONOMY), types.as_bytes())?;
        write_atomic(&self.path(SUBQUESTIONS), sqs.as_bytes())?;
        write_atomic(&self.path(REGISTRY), state.registry.to_lines().as_bytes())
    }

    pub fn append_review<'a>(&self, items: impl IntoIterator<Item = &'a ReviewItem>) -> Result<(), CliError> {
        append_lines(&self.path(REVIEW_QUEUE), items)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_then_exists_then_force() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::new(dir.path());
        let cfg = dir.path().join("cotrel.toml");
        let s = ws.init(&cfg, false).unwrap();
        assert_eq!((s.types, s.sub_questions, s.templates, s.wrote_config), (11, 10, 11, true));
        assert!(matches!(ws.init(&cfg, false), Err(CliError::WorkspaceExists(_))));
        let s = ws.init(&cfg, true).unwrap();
        assert!(!s.wrote_config);
        let backup = s.backup.unwrap();
        assert!(backup.join(REGISTRY).exists());
        let st = ws.load_state().unwrap();
        assert_eq!(st.registry.active_types().count(), 11);
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::new(dir.path());
        let g = ws.lock().unwrap();
        assert!(matches!(ws.lock(), Err(CliError::Locked(_))));
        drop(g);
        ws.lock().unwrap();
    }
}
