//! CoT templates: per-type sub-question chains, their structural rules, and
//! the versioned registry that activates and rolls them back.
//!
//! Structural rules for a chain bound to a question type:
//! - 2 to 4 entries, no repeats, all present in the sub-question bank;
//! - starts with `tid` for TR, `sid` for GL and `od` otherwise;
//! - OLR additionally asks `ev` before any entry other than `od`/`ev`.
//!
//! Custom types inherit the rule of their parent; parentless custom types use
//! the default `od` start.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, ChatBackend, ChatTurn, Route};
use crate::corpus::Sample;
use crate::reasoner::ReasoningTrace;
use crate::taxonomy::{sq_chain, SqId, SubQuestionBank, Taxonomy, TypeId};

pub const MIN_CHAIN: usize = 2;
pub const MAX_CHAIN: usize = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CotError {
    #[error("unknown question type `{0}`")]
    UnknownType(TypeId),
    #[error("chain does not begin with the mandatory prefix for `{0}`")]
    InvalidChain(TypeId),
    #[error("template for `{question_type}` violates constraints: {violations:?}")]
    Invalid {
        question_type: TypeId,
        violations: Vec<Violation>,
    },
    #[error("version conflict for `{question_type}`: expected v{expected}, got v{got}")]
    VersionConflict {
        question_type: TypeId,
        expected: u32,
        got: u32,
    },
    #[error("no earlier template to roll back to for `{0}`")]
    NothingToRollBack(TypeId),
    #[error("template proposal failed: {0}")]
    ProposalFailed(String),
    #[error("template proposal unavailable: {0}")]
    ProposalUnavailable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Provenance {
    Seed,
    BackendProposed,
    Realigned,
    Manual,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CotTemplate {
    pub question_type: TypeId,
    pub chain: Vec<SqId>,
    pub version: u32,
    pub parent_version: Option<u32>,
    pub provenance: Provenance,
}

impl CotTemplate {
    /// Compact `a>b>c` rendering, also used as a routing qualifier.
    pub fn chain_tag(&self) -> String {
        chain_tag(&self.chain)
    }
}

pub fn chain_tag(chain: &[SqId]) -> String {
    chain.iter().map(SqId::as_str).collect::<Vec<_>>().join(">")
}

/// A violated structural rule and where it occurred.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum Violation {
    UnknownType { question_type: TypeId },
    Length { len: usize },
    WrongPrefix { position: usize, expected: SqId, found: Option<SqId> },
    EvOrder { position: usize, found: SqId },
    Duplicate { position: usize, id: SqId },
    NotInBank { position: usize, id: SqId },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UnknownType { question_type } => write!(f, "unknown-type: {question_type}"),
            Violation::Length { len } => write!(f, "length: {len} not in {MIN_CHAIN}..={MAX_CHAIN}"),
            Violation::WrongPrefix { position, expected, found } => write!(
                f,
                "wrong-prefix at {position}: expected {expected}, found {}",
                found.as_ref().map_or("nothing", SqId::as_str)
            ),
            Violation::EvOrder { position, found } => write!(f, "ev-order at {position}: {found} before ev"),
            Violation::Duplicate { position, id } => write!(f, "duplicate at {position}: {id}"),
            Violation::NotInBank { position, id } => write!(f, "not-in-bank at {position}: {id}"),
        }
    }
}

/// Required opening sub-questions for a question type.
pub fn mandatory_prefix(qt: &TypeId, taxonomy: &Taxonomy) -> Result<Vec<SqId>, CotError> {
    if !taxonomy.contains(qt) {
        return Err(CotError::UnknownType(qt.clone()));
    }
    let root = taxonomy.root_of(qt);
    Ok(match root.as_str() {
        TypeId::TR => sq_chain(&["tid"]),
        TypeId::GL => sq_chain(&["sid"]),
        TypeId::OLR => sq_chain(&["od", "ev"]),
        _ => sq_chain(&["od"]),
    })
}

/// Returns every violated rule; an empty list means the template is valid.
pub fn validate_template(t: &CotTemplate, bank: &SubQuestionBank, taxonomy: &Taxonomy) -> Vec<Violation> {
    let mut out = Vec::new();
    let prefix = match mandatory_prefix(&t.question_type, taxonomy) {
        Ok(p) => p,
        Err(_) => {
            out.push(Violation::UnknownType {
                question_type: t.question_type.clone(),
            });
            return out;
        }
    };
    let chain = &t.chain;
    if !(MIN_CHAIN..=MAX_CHAIN).contains(&chain.len()) {
        out.push(Violation::Length { len: chain.len() });
    }
    if chain.first() != prefix.first() {
        out.push(Violation::WrongPrefix {
            position: 0,
            expected: prefix[0].clone(),
            found: chain.first().cloned(),
        });
    }
    let ev = SqId::from("ev");
    if prefix.contains(&ev) {
        let ev_pos = chain.iter().position(|s| *s == ev);
        let od = SqId::from("od");
        if let Some((position, found)) = chain
            .iter()
            .enumerate()
            .find(|(i, s)| **s != od && **s != ev && ev_pos.is_none_or(|e| *i < e))
        {
            out.push(Violation::EvOrder {
                position,
                found: found.clone(),
            });
        } else if ev_pos.is_none() {
            out.push(Violation::WrongPrefix {
                position: chain.len().min(1),
                expected: ev,
                found: chain.get(1).cloned(),
            });
        }
    }
    for (i, id) in chain.iter().enumerate() {
        if chain[..i].contains(id) {
            out.push(Violation::Duplicate {
                position: i,
                id: id.clone(),
            });
        }
        if !bank.contains(id) {
            out.push(Violation::NotInBank {
                position: i,
                id: id.clone(),
            });
        }
    }
    out
}

/// Keeps the mandatory prefix and the earliest following entries up to the
/// maximum chain length.
pub fn truncate_chain(chain: &[SqId], qt: &TypeId, taxonomy: &Taxonomy) -> Result<Vec<SqId>, CotError> {
    let prefix = mandatory_prefix(qt, taxonomy)?;
    if !chain.starts_with(&prefix) {
        return Err(CotError::InvalidChain(qt.clone()));
    }
    Ok(chain.iter().take(MAX_CHAIN).cloned().collect())
}

/// Seed chain for a type: its mandatory prefix followed by `kr`.
pub fn seed_template(qt: &TypeId, taxonomy: &Taxonomy) -> Result<CotTemplate, CotError> {
    let mut chain = mandatory_prefix(qt, taxonomy)?;
    chain.push(SqId::from("kr"));
    Ok(CotTemplate {
        question_type: qt.clone(),
        chain,
        version: 1,
        parent_version: None,
        provenance: Provenance::Seed,
    })
}

/// Parses a sub-question id sequence from a reply. A line starting with
/// `CHAIN:` takes precedence over the rest of the text. Tokens that do not
/// name a bank entry are returned in the error list.
pub fn parse_chain_reply(reply: &str, bank: &SubQuestionBank) -> (Vec<SqId>, Vec<String>) {
    let body = reply
        .lines()
        .rev()
        .find_map(|l| {
            let t = l.trim();
            t.get(..6)
                .filter(|p| p.eq_ignore_ascii_case("chain:"))
                .map(|_| &t[6..])
        })
        .unwrap_or(reply);
    let mut ids = Vec::new();
    let mut unknown = Vec::new();
    for tok in body
        .split(|c: char| c.is_whitespace() || matches!(c, ',' | '>' | '[' | ']' | ';' | '→' | '|'))
        .map(|t| t.trim_matches(|c: char| !(c.is_alphanumeric() || c == '_' || c == '-')))
        .filter(|t| !t.is_empty() && *t != "-")
    {
        match bank.resolve(tok) {
            Some(id) => ids.push(id.clone()),
            None => unknown.push(tok.to_string()),
        }
    }
    (ids, unknown)
}

/// Forces an arbitrary bank-id sequence into a valid chain for `qt`:
/// duplicates are dropped, the mandatory prefix is moved to the front,
/// the chain is truncated to the maximum length and padded with `kr` (or the
/// first unused bank entry) when shorter than the minimum.
pub fn conform_chain(
    ids: &[SqId],
    qt: &TypeId,
    bank: &SubQuestionBank,
    taxonomy: &Taxonomy,
) -> Result<Vec<SqId>, CotError> {
    let prefix = mandatory_prefix(qt, taxonomy)?;
    let mut chain = prefix.clone();
    for id in ids {
        if !chain.contains(id) {
            chain.push(id.clone());
        }
    }
    let mut chain = truncate_chain(&chain, qt, taxonomy)?;
    let fillers = std::iter::once(SqId::from("kr")).chain(bank.entries().iter().map(|e| e.id.clone()));
    for filler in fillers {
        if chain.len() >= MIN_CHAIN {
            break;
        }
        if !chain.contains(&filler) && bank.contains(&filler) {
            chain.push(filler);
        }
    }
    Ok(chain)
}

pub fn proposal_prompt(
    qt: &TypeId,
    exemplars: &[(&Sample, &ReasoningTrace)],
    bank: &SubQuestionBank,
    taxonomy: &Taxonomy,
) -> Result<String, CotError> {
    let prefix = mandatory_prefix(qt, taxonomy)?;
    let desc = taxonomy.get(qt).map(|t| t.description.as_str()).unwrap_or_default();
    let mut p = format!(
        "Build a reasoning chain of sub-questions for questions of type {qt} ({desc}).\n\nAvailable sub-questions:\n"
    );
    for e in bank.entries() {
        p.push_str(&format!("- {}: {}\n", e.id, e.text));
    }
    p.push_str(&format!(
        "\nConstraints: use only the ids above, no repeats, {MIN_CHAIN} to {MAX_CHAIN} entries in total, \
         start with {}.",
        chain_tag(&prefix).replace('>', ", then ")
    ));
    if !exemplars.is_empty() {
        p.push_str("\n\nThe following samples were answered incorrectly with step-by-step reasoning. \
                    Where a direct rationale is shown, reorganize the chain to follow that reasoning path.\n");
        for (i, (s, t)) in exemplars.iter().enumerate() {
            p.push_str(&format!("\nExample {}:\nQuestion: {}\n", i + 1, s.question));
            if !t.rationale_raw.is_empty() {
                p.push_str(&format!("Direct rationale:\n{}\n", t.rationale_raw));
            }
            if !t.final_answer_raw.is_empty() {
                p.push_str(&format!("Answer given: {}\n", t.final_answer_raw));
            }
        }
    }
    p.push_str("\nReply with one line of the form `CHAIN: id, id, ...`.");
    Ok(p)
}

/// Asks the backend for a chain and enforces every structural rule on the
/// result. Replies naming ids outside the bank get one corrective retry.
#[allow(clippy::too_many_arguments)]
pub fn propose_template(
    qt: &TypeId,
    exemplars: &[(&Sample, &ReasoningTrace)],
    bank: &SubQuestionBank,
    taxonomy: &Taxonomy,
    backend: &dyn ChatBackend,
    route: &Route,
    version: u32,
    parent_version: Option<u32>,
    provenance: Provenance,
) -> Result<CotTemplate, CotError> {
    if bank.is_empty() {
        return Err(CotError::ProposalFailed("sub-question bank is empty".into()));
    }
    let prompt = proposal_prompt(qt, exemplars, bank, taxonomy)?;
    let system = "You design step-by-step question decompositions for visual question answering.";
    let image = exemplars.first().map(|(s, _)| s.image_ref.clone());
    let mut turns = vec![
        ChatTurn::system(route.header(system)),
        ChatTurn::user(prompt, image),
    ];
    let mut last_problem = String::new();
    for attempt in 0..2 {
        if attempt == 1 {
            let stage = format!("{}:retry", route.stage);
            turns[0] = ChatTurn::system(Route::new(&route.sample_id, stage).header(system));
        }
        let reply = backend.complete(&turns).map_err(|e| match e {
            BackendError::InvalidRequest(m) => CotError::ProposalFailed(m),
            other => CotError::ProposalUnavailable(other.to_string()),
        })?;
        let (ids, unknown) = parse_chain_reply(&reply, bank);
        if unknown.is_empty() && !ids.is_empty() {
            let chain = conform_chain(&ids, qt, bank, taxonomy)?;
            let t = CotTemplate {
                question_type: qt.clone(),
                chain,
                version,
                parent_version,
                provenance,
            };
            let violations = validate_template(&t, bank, taxonomy);
            debug_assert!(violations.is_empty(), "{violations:?}");
            if !violations.is_empty() {
                return Err(CotError::Invalid {
                    question_type: qt.clone(),
                    violations,
                });
            }
            return Ok(t);
        }
        last_problem = if ids.is_empty() && unknown.is_empty() {
            "empty reply".to_string()
        } else {
            format!("ids outside the bank: {}", unknown.join(", "))
        };
        turns.push(ChatTurn::assistant(if reply.trim().is_empty() { "(empty)".to_string() } else { reply }));
        turns.push(ChatTurn::user(
            format!(
                "Your reply used {last_problem}. Use only these ids: {}. Reply with `CHAIN: id, id, ...`.",
                bank.entries().iter().map(|e| e.id.as_str()).collect::<Vec<_>>().join(", ")
            ),
            None,
        ));
    }
    Err(CotError::ProposalFailed(last_problem))
}

/// One stored version of a type's template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateRecord {
    pub question_type: TypeId,
    pub version: u32,
    pub chain: Vec<SqId>,
    pub provenance: Provenance,
    pub parent_version: Option<u32>,
    pub rolled_back: bool,
    pub generation: u32,
}

impl TemplateRecord {
    pub fn template(&self) -> CotTemplate {
        CotTemplate {
            question_type: self.question_type.clone(),
            chain: self.chain.clone(),
            version: self.version,
            parent_version: self.parent_version,
            provenance: self.provenance,
        }
    }
}

/// Versioned per-type templates. The active template of a type is its
/// highest version that has not been rolled back.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TemplateRegistry {
    history: BTreeMap<TypeId, Vec<TemplateRecord>>,
    pub generation: u32,
}

/// Outcome of a rollback.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RolledBack {
    pub question_type: TypeId,
    pub from_version: u32,
    pub to_version: u32,
}

impl TemplateRegistry {
    /// Registry holding the seed template of every type in the taxonomy.
    pub fn seeded(taxonomy: &Taxonomy, bank: &SubQuestionBank) -> Result<Self, CotError> {
        let mut reg = Self::default();
        for t in taxonomy.types() {
            reg.activate(seed_template(&t.id, taxonomy)?, bank, taxonomy)?;
        }
        Ok(reg)
    }

    pub fn active(&self, qt: &TypeId) -> Option<CotTemplate> {
        self.active_record(qt).map(TemplateRecord::template)
    }

    fn active_record(&self, qt: &TypeId) -> Option<&TemplateRecord> {
        self.history.get(qt)?.iter().rev().find(|r| !r.rolled_back)
    }

    pub fn active_types(&self) -> impl Iterator<Item = &TypeId> {
        self.history
            .iter()
            .filter(|(_, v)| v.iter().any(|r| !r.rolled_back))
            .map(|(k, _)| k)
    }

    pub fn history(&self, qt: &TypeId) -> &[TemplateRecord] {
        self.history.get(qt).map_or(&[], Vec::as_slice)
    }

    /// Version number the next activation for `qt` must carry.
    pub fn next_version(&self, qt: &TypeId) -> u32 {
        self.history(qt).last().map_or(1, |r| r.version + 1)
    }

    /// Makes `t` the active template of its type after validating it.
    pub fn activate(&mut self, t: CotTemplate, bank: &SubQuestionBank, taxonomy: &Taxonomy) -> Result<(), CotError> {
        let violations = validate_template(&t, bank, taxonomy);
        if !violations.is_empty() {
            return Err(CotError::Invalid {
                question_type: t.question_type,
                violations,
            });
        }
        let expected = self.next_version(&t.question_type);
        if t.version != expected {
            return Err(CotError::VersionConflict {
                question_type: t.question_type,
                expected,
                got: t.version,
            });
        }
        let record = TemplateRecord {
            question_type: t.question_type.clone(),
            version: t.version,
            chain: t.chain,
            provenance: t.provenance,
            parent_version: t.parent_version,
            rolled_back: false,
            generation: self.generation,
        };
        self.history.entry(t.question_type).or_default().push(record);
        Ok(())
    }

    /// Flags the active version as rolled back, re-activating its predecessor.
    pub fn rollback(&mut self, qt: &TypeId) -> Result<RolledBack, CotError> {
        let versions = self
            .history
            .get_mut(qt)
            .ok_or_else(|| CotError::NothingToRollBack(qt.clone()))?;
        let live: Vec<usize> = versions
            .iter()
            .enumerate()
            .filter(|(_, r)| !r.rolled_back)
            .map(|(i, _)| i)
            .collect();
        let [.., prev, cur] = live.as_slice() else {
            return Err(CotError::NothingToRollBack(qt.clone()));
        };
        versions[*cur].rolled_back = true;
        Ok(RolledBack {
            question_type: qt.clone(),
            from_version: versions[*cur].version,
            to_version: versions[*prev].version,
        })
    }

    /// Every stored version, grouped by type in id order.
    pub fn records(&self) -> impl Iterator<Item = &TemplateRecord> {
        self.history.values().flatten()
    }

    pub fn from_records(records: Vec<TemplateRecord>) -> Self {
        let mut reg = Self::default();
        for r in records {
            reg.generation = reg.generation.max(r.generation);
            reg.history.entry(r.question_type.clone()).or_default().push(r);
        }
        for v in reg.history.values_mut() {
            v.sort_by_key(|r| r.version);
        }
        reg
    }

    /// Checks that every active template is still valid against the vocabularies.
    pub fn check(&self, bank: &SubQuestionBank, taxonomy: &Taxonomy) -> Result<(), CotError> {
        for qt in self.active_types() {
            let t = self.active(qt).expect("active type");
            let violations = validate_template(&t, bank, taxonomy);
            if !violations.is_empty() {
                return Err(CotError::Invalid {
                    question_type: qt.clone(),
                    violations,
                });
            }
        }
        Ok(())
    }

    /// One JSON record per line, types in id order and versions ascending.
    pub fn to_lines(&self) -> String {
        self.records()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn from_lines(text: &str) -> Result<Self, serde_json::Error> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<Vec<TemplateRecord>, _>>()?;
        Ok(Self::from_records(records))
    }
}
