//! Iterative refinement: taxonomy proposals from wrong answers, per-type
//! template updates from recovered samples, regression rollback and the
//! manual review queue.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, ChatBackend, ChatTurn, Route};
use crate::corpus::{Corpus, Sample};
use crate::cot::{seed_template, CotError, CotTemplate, Provenance, TemplateRecord, TemplateRegistry};
use crate::fpdetect::{detect_all, DetectConfig, DetectContext, DetectionReport, FpError, Verdict, VerdictState};
use crate::metrics::{is_correct, MetricsError};
use crate::reasoner::{run_multistep, ReasonerError, ReasoningTrace, TraceStatus};
use crate::taxonomy::{QuestionType, SqId, SubQuestion, SubQuestionBank, Taxonomy, TaxonomyError, TypeAssignment, TypeId};

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("review item `{item_id}`: {reason}")]
    ReviewConflict { item_id: String, reason: String },
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Cot(#[from] CotError),
    #[error(transparent)]
    Detect(#[from] FpError),
    #[error(transparent)]
    Reasoner(#[from] ReasonerError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Action {
    Proposed,
    Activated,
    RolledBack,
    ReviewQueued,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundAction {
    pub question_type: TypeId,
    pub action: Action,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StopReason {
    Converged,
    Budget,
    RegressionReview,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementRound {
    pub generation: u32,
    pub input_registry_snapshot: Vec<TemplateRecord>,
    pub taxonomy_snapshot: Vec<QuestionType>,
    pub per_type_accuracy_before: BTreeMap<TypeId, f64>,
    pub per_type_accuracy_after: BTreeMap<TypeId, f64>,
    pub actions: Vec<RoundAction>,
    pub tdfm_count: usize,
    pub fp_count: usize,
    /// Set on the final round of an `iterate` call.
    pub stop_reason: Option<StopReason>,
    /// Some traces of this round were aborted by the backend.
    pub partial: bool,
}

impl RefinementRound {
    pub fn count(&self, action: Action) -> usize {
        self.actions.iter().filter(|a| a.action == action).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReviewTrigger {
    Regression,
    ProposalFailure,
    Operator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReviewOption {
    SplitType,
    ExtendBank,
    Keep,
    RetireTemplate,
}

impl ReviewOption {
    pub const ALL: [ReviewOption; 4] = [
        ReviewOption::SplitType,
        ReviewOption::ExtendBank,
        ReviewOption::Keep,
        ReviewOption::RetireTemplate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ReviewOption::SplitType => "SPLIT_TYPE",
            ReviewOption::ExtendBank => "EXTEND_BANK",
            ReviewOption::Keep => "KEEP",
            ReviewOption::RetireTemplate => "RETIRE_TEMPLATE",
        }
    }
}

impl fmt::Display for ReviewOption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ReviewOption {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|o| o.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown review option `{s}`"))
    }
}

/// A chosen option with the data it needs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "option", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReviewChoice {
    SplitType { new_type: QuestionType },
    ExtendBank { sub_question: SubQuestion },
    Keep,
    RetireTemplate,
}

impl ReviewChoice {
    pub fn option(&self) -> ReviewOption {
        match self {
            ReviewChoice::SplitType { .. } => ReviewOption::SplitType,
            ReviewChoice::ExtendBank { .. } => ReviewOption::ExtendBank,
            ReviewChoice::Keep => ReviewOption::Keep,
            ReviewChoice::RetireTemplate => ReviewOption::RetireTemplate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub choice: ReviewChoice,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub item_id: String,
    pub question_type: TypeId,
    pub trigger: ReviewTrigger,
    pub generation: u32,
    pub exemplar_sample_ids: Vec<String>,
    pub options: Vec<ReviewOption>,
    /// Type proposed by taxonomy analysis, for operator-triggered items.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposed_type: Option<QuestionType>,
    pub detail: String,
    pub resolution: Option<Resolution>,
    /// Run that raised the item, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
}

impl ReviewItem {
    pub fn is_open(&self) -> bool {
        self.resolution.is_none()
    }
}

/// Review items in creation order. Stored as an append-only list of item
/// snapshots where the latest snapshot of an id wins.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ReviewQueue {
    items: Vec<ReviewItem>,
}

impl ReviewQueue {
    pub fn items(&self) -> &[ReviewItem] {
        &self.items
    }

    pub fn items_mut(&mut self) -> &mut [ReviewItem] {
        &mut self.items
    }

    pub fn open_items(&self) -> impl Iterator<Item = &ReviewItem> {
        self.items.iter().filter(|i| i.is_open())
    }

    pub fn get(&self, item_id: &str) -> Option<&ReviewItem> {
        self.items.iter().find(|i| i.item_id == item_id)
    }

    /// Types with an unresolved item; their refinement is paused.
    pub fn blocked_types(&self) -> BTreeSet<TypeId> {
        self.open_items().map(|i| i.question_type.clone()).collect()
    }

    pub fn next_id(&self) -> String {
        format!("R{:04}", self.items.len() + 1)
    }

    /// Adds an item and returns its id.
    pub fn push(&mut self, mut item: ReviewItem) -> String {
        item.item_id = self.next_id();
        let id = item.item_id.clone();
        self.items.push(item);
        id
    }

    fn upsert(&mut self, item: ReviewItem) {
        match self.items.iter_mut().find(|i| i.item_id == item.item_id) {
            Some(slot) => *slot = item,
            None => self.items.push(item),
        }
    }

    pub fn from_lines(text: &str) -> Result<Self, serde_json::Error> {
        let mut q = Self::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            q.upsert(serde_json::from_str(line)?);
        }
        Ok(q)
    }

    pub fn to_line(item: &ReviewItem) -> String {
        serde_json::to_string(item).expect("review item serializes") + "\n"
    }
}

/// Mutable refinement state: the vocabularies, templates and review queue.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineState {
    pub taxonomy: Taxonomy,
    pub bank: SubQuestionBank,
    pub registry: TemplateRegistry,
    pub review: ReviewQueue,
}

/// What a review resolution changed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppliedChange {
    pub item_id: String,
    pub question_type: TypeId,
    pub choice: ReviewOption,
    pub actions: Vec<RoundAction>,
}

/// Applies an operator decision to an open review item.
pub fn resolve_review(
    state: &mut RefineState,
    item_id: &str,
    choice: ReviewChoice,
    note: &str,
) -> Result<AppliedChange, RefineError> {
    let conflict = |reason: &str| RefineError::ReviewConflict {
        item_id: item_id.to_string(),
        reason: reason.to_string(),
    };
    let item = state.review.get(item_id).ok_or_else(|| conflict("no such item"))?.clone();
    if !item.is_open() {
        return Err(conflict("already resolved"));
    }
    if !item.options.contains(&choice.option()) {
        return Err(conflict(&format!("{} is not an option", choice.option())));
    }
    let qt = item.question_type.clone();
    let mut actions = Vec::new();
    match &choice {
        ReviewChoice::SplitType { new_type } => {
            let taxonomy = state.taxonomy.extend(new_type.clone())?;
            let seed = seed_template(&new_type.id, &taxonomy)?;
            let mut registry = state.registry.clone();
            registry.activate(seed.clone(), &state.bank, &taxonomy)?;
            state.taxonomy = taxonomy;
            state.registry = registry;
            actions.push(RoundAction {
                question_type: new_type.id.clone(),
                action: Action::Activated,
                detail: format!("new type seeded with {}", seed.chain_tag()),
            });
        }
        ReviewChoice::ExtendBank { sub_question } => {
            state.bank = state.bank.extend(sub_question.clone())?;
        }
        ReviewChoice::Keep => {}
        ReviewChoice::RetireTemplate => {
            let rb = state.registry.rollback(&qt)?;
            actions.push(RoundAction {
                question_type: qt.clone(),
                action: Action::RolledBack,
                detail: format!("v{} retired, v{} active", rb.from_version, rb.to_version),
            });
        }
    }
    let mut resolved = item;
    resolved.resolution = Some(Resolution {
        choice: choice.clone(),
        note: note.to_string(),
    });
    state.review.upsert(resolved);
    Ok(AppliedChange {
        item_id: item_id.to_string(),
        question_type: qt,
        choice: choice.option(),
        actions,
    })
}

/// Outcome of an analysis pass: validated proposals and skipped lines.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TaxonomyProposals {
    pub proposals: Vec<QuestionType>,
    pub rejected: Vec<(String, String)>,
}

const ANALYSIS_BATCH: usize = 20;

pub fn analysis_prompt(batch: &[(&Sample, &ReasoningTrace)], taxonomy: &Taxonomy) -> String {
    let mut p = String::from(
        "The questions below were answered incorrectly. Check whether the current question types \
         describe them well enough to choose a good reasoning chain.\n\nCurrent question types:\n",
    );
    for t in taxonomy.types() {
        p.push_str(&format!("- {}: {}\n", t.id, t.description));
    }
    p.push_str("\nIncorrect samples:\n");
    for (i, (s, t)) in batch.iter().enumerate() {
        p.push_str(&format!(
            "{}. Question: {}\n   Model answer: {}\n   Expected: {}\n",
            i + 1,
            s.question,
            t.final_answer_raw,
            s.gold_answers.join(" / ")
        ));
    }
    p.push_str(
        "\nIf some of these questions need a new or more specific type, propose it on its own line as\n\
         NEW_TYPE: <Name> | parent: <existing type id or none> | <one-line description>\n\
         Reply with NONE when the current types suffice.",
    );
    p
}

fn parse_proposal(line: &str, taxonomy: &Taxonomy) -> Result<QuestionType, String> {
    let body = line.trim().get(9..).filter(|_| line.trim()[..9].eq_ignore_ascii_case("new_type:"));
    let body = body.ok_or("missing NEW_TYPE prefix")?;
    let parts: Vec<&str> = body.split('|').map(str::trim).collect();
    let [name, parent, desc] = parts.as_slice() else {
        return Err("expected `name | parent: id | description`".into());
    };
    if name.is_empty() || !name.chars().all(|c| c.is_alphanumeric() || c == '_' || c == '-') {
        return Err(format!("invalid type name `{name}`"));
    }
    let parent = parent
        .strip_prefix("parent:")
        .or_else(|| parent.strip_prefix("Parent:"))
        .map(str::trim)
        .ok_or("missing parent field")?;
    let parent = if parent.is_empty() || parent.eq_ignore_ascii_case("none") {
        None
    } else {
        Some(
            taxonomy
                .resolve(parent)
                .ok_or_else(|| TaxonomyError::UnknownParent(parent.to_string()).to_string())?
                .as_str()
                .to_string(),
        )
    };
    if desc.is_empty() {
        return Err("empty description".into());
    }
    Ok(QuestionType::custom(*name, *desc, parent.as_deref()))
}

/// Asks the backend, in batches, whether wrongly answered samples call for
/// new question types. Proposals are validated against the taxonomy (and each
/// other) but not applied.
pub fn analyze_incorrect(
    incorrect: &[(&Sample, &ReasoningTrace)],
    taxonomy: &Taxonomy,
    backend: &dyn ChatBackend,
) -> Result<TaxonomyProposals, RefineError> {
    let mut out = TaxonomyProposals::default();
    let mut working = taxonomy.clone();
    for (b, batch) in incorrect.chunks(ANALYSIS_BATCH).enumerate() {
        let turns = [
            ChatTurn::system(
                Route::new(format!("batch-{}", b + 1), "analyze")
                    .header("You maintain a taxonomy of visual question types."),
            ),
            ChatTurn::user(analysis_prompt(batch, &working), None),
        ];
        let reply = backend.complete(&turns)?;
        for line in reply.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if line.eq_ignore_ascii_case("none") {
                continue;
            }
            if !line.to_ascii_lowercase().starts_with("new_type:") {
                continue;
            }
            match parse_proposal(line, &working).and_then(|qt| {
                working.extend(qt.clone()).map(|t| (t, qt)).map_err(|e| e.to_string())
            }) {
                Ok((next, qt)) => {
                    working = next;
                    out.proposals.push(qt);
                }
                Err(reason) => {
                    log::warn!("skipping taxonomy proposal `{line}`: {reason}");
                    out.rejected.push((line.to_string(), reason));
                }
            }
        }
    }
    Ok(out)
}

/// Per-type next templates from the realigned chains of recovered samples:
/// the most frequent chain wins, ties go to the shorter and then the
/// lexicographically smaller chain. Types whose winner equals their active
/// chain get no proposal.
pub fn summarize_templates(verdicts: &[Verdict], registry: &TemplateRegistry) -> Vec<CotTemplate> {
    let mut votes: BTreeMap<&TypeId, BTreeMap<&[SqId], usize>> = BTreeMap::new();
    for v in verdicts.iter().filter(|v| v.state == VerdictState::NonfpRecovered) {
        if let Some(t) = &v.evidence.realigned_template {
            *votes.entry(&t.question_type).or_default().entry(t.chain.as_slice()).or_default() += 1;
        }
    }
    votes
        .into_iter()
        .filter_map(|(qt, chains)| {
            let (chain, _) = chains
                .into_iter()
                .min_by(|(a, na), (b, nb)| nb.cmp(na).then(a.len().cmp(&b.len())).then(a.cmp(b)))?;
            let active = registry.active(qt);
            if active.as_ref().is_some_and(|t| t.chain == chain) {
                return None;
            }
            Some(CotTemplate {
                question_type: qt.clone(),
                chain: chain.to_vec(),
                version: registry.next_version(qt),
                parent_version: active.map(|t| t.version),
                provenance: Provenance::Realigned,
            })
        })
        .collect()
}

/// Inputs that stay fixed across generations.
#[derive(Clone, Copy)]
pub struct RefineContext<'a> {
    pub corpus: &'a Corpus,
    pub direct: &'a [ReasoningTrace],
    pub assignments: &'a [TypeAssignment],
    pub backend: &'a dyn ChatBackend,
    pub detect: &'a DetectConfig,
    pub auto_accept: bool,
    /// Run the taxonomy analysis before the first generation.
    pub analyze: bool,
}

/// Everything one generation produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub round: RefinementRound,
    pub detection: DetectionReport,
    /// Multi-step traces with the templates active at the start of the round.
    pub multi_before: Vec<ReasoningTrace>,
    /// Multi-step traces after activations and rollbacks.
    pub multi_after: Vec<ReasoningTrace>,
}

/// Per-type accuracy plus per-sample correctness.
type TypeScores = (BTreeMap<TypeId, f64>, BTreeMap<String, bool>);

fn per_type_multi_accuracy(
    corpus: &Corpus,
    traces: &[ReasoningTrace],
    types: &BTreeMap<String, TypeId>,
    cfg: &DetectConfig,
) -> Result<TypeScores, MetricsError> {
    let mut sums: BTreeMap<TypeId, (usize, usize)> = BTreeMap::new();
    let mut correct = BTreeMap::new();
    for t in traces.iter().filter(|t| t.status == TraceStatus::Complete) {
        let (Some(s), Some(qt)) = (corpus.get(&t.sample_id), types.get(&t.sample_id)) else {
            continue;
        };
        let ok = is_correct(&t.final_answer_raw, s, cfg.scheme)?;
        correct.insert(t.sample_id.clone(), ok);
        let e = sums.entry(qt.clone()).or_default();
        e.0 += usize::from(ok);
        e.1 += 1;
    }
    Ok((
        sums.into_iter().map(|(k, (c, n))| (k, c as f64 / n as f64)).collect(),
        correct,
    ))
}

fn apply_taxonomy_analysis(
    ctx: &RefineContext<'_>,
    state: &mut RefineState,
    generation: u32,
    actions: &mut Vec<RoundAction>,
) -> Result<(), RefineError> {
    let scheme = ctx.detect.scheme;
    let mut incorrect = Vec::new();
    for t in ctx.direct.iter().filter(|t| t.status == TraceStatus::Complete) {
        if let Some(s) = ctx.corpus.get(&t.sample_id) {
            if !is_correct(&t.final_answer_raw, s, scheme)? {
                incorrect.push((s, t));
            }
        }
    }
    if incorrect.is_empty() {
        return Ok(());
    }
    let proposals = match analyze_incorrect(&incorrect, &state.taxonomy, ctx.backend) {
        Ok(p) => p,
        Err(e) => {
            log::warn!("taxonomy analysis skipped: {e}");
            return Ok(());
        }
    };
    for qt in proposals.proposals {
        actions.push(RoundAction {
            question_type: qt.id.clone(),
            action: Action::Proposed,
            detail: format!("new type: {}", qt.description),
        });
        if ctx.auto_accept {
            let taxonomy = state.taxonomy.extend(qt.clone())?;
            state.registry.activate(seed_template(&qt.id, &taxonomy)?, &state.bank, &taxonomy)?;
            state.taxonomy = taxonomy;
            actions.push(RoundAction {
                question_type: qt.id.clone(),
                action: Action::Activated,
                detail: "type added and seeded".into(),
            });
        } else {
            let id = state.review.push(ReviewItem {
                item_id: String::new(),
                question_type: qt.id.clone(),
                trigger: ReviewTrigger::Operator,
                generation,
                exemplar_sample_ids: incorrect.iter().take(5).map(|(s, _)| s.sample_id.clone()).collect(),
                options: vec![ReviewOption::SplitType, ReviewOption::Keep],
                proposed_type: Some(qt.clone()),
                detail: "taxonomy proposal awaiting confirmation".into(),
                resolution: None,
                run_id: None,
            });
            actions.push(RoundAction {
                question_type: qt.id.clone(),
                action: Action::ReviewQueued,
                detail: id,
            });
        }
    }
    Ok(())
}

/// Runs up to `budget` refinement generations.
///
/// Each generation runs multi-step reasoning with the active templates,
/// adjudicates TDFM samples, activates the summarized proposals of unblocked
/// types, re-runs those types and rolls back any type whose multi-step
/// accuracy dropped, queueing a regression review for it.
///
/// `initial_multi` supplies the first generation's multi-step traces when they
/// were already produced with the current templates.
pub fn iterate(
    ctx: &RefineContext<'_>,
    state: &mut RefineState,
    budget: u32,
    initial_multi: Option<Vec<ReasoningTrace>>,
) -> Result<Vec<Generation>, RefineError> {
    let types: BTreeMap<String, TypeId> = ctx
        .assignments
        .iter()
        .map(|a| (a.sample_id.clone(), a.question_type.clone()))
        .collect();
    let samples: Vec<&Sample> = ctx.corpus.samples().iter().collect();
    let cfg = ctx.detect;
    let mut out: Vec<Generation> = Vec::new();
    let mut carried = initial_multi;

    for g in 1..=budget {
        state.registry.generation += 1;
        let generation = state.registry.generation;
        let input_registry_snapshot: Vec<TemplateRecord> = state.registry.records().cloned().collect();
        let taxonomy_snapshot = state.taxonomy.types().to_vec();
        let mut actions = Vec::new();
        if g == 1 && ctx.analyze {
            apply_taxonomy_analysis(ctx, state, generation, &mut actions)?;
        }

        let before = match carried.take() {
            Some(t) => t,
            None => run_multistep(
                &samples,
                &types,
                &state.registry,
                &state.bank,
                &state.taxonomy,
                ctx.backend,
                &cfg.reasoner,
                cfg.parallelism,
            )?,
        };
        let detection = detect_all(&DetectContext {
            corpus: ctx.corpus,
            direct: ctx.direct,
            multi: &before,
            assignments: ctx.assignments,
            registry: &state.registry,
            bank: &state.bank,
            taxonomy: &state.taxonomy,
            backend: ctx.backend,
            config: cfg,
            generation,
        })?;

        let blocked = state.review.blocked_types();
        let proposals = summarize_templates(&detection.verdicts, &state.registry);
        let (open, held): (Vec<_>, Vec<_>) = proposals.into_iter().partition(|p| !blocked.contains(&p.question_type));
        for p in &held {
            log::info!("proposal for {} held: type awaits review", p.question_type);
        }
        let mut activated = BTreeSet::new();
        for p in open {
            actions.push(RoundAction {
                question_type: p.question_type.clone(),
                action: Action::Proposed,
                detail: p.chain_tag(),
            });
            let (qt, tag, version) = (p.question_type.clone(), p.chain_tag(), p.version);
            state.registry.activate(p, &state.bank, &state.taxonomy)?;
            actions.push(RoundAction {
                question_type: qt.clone(),
                action: Action::Activated,
                detail: format!("v{version} {tag}"),
            });
            activated.insert(qt);
        }

        let affected: Vec<&Sample> = samples
            .iter()
            .copied()
            .filter(|s| types.get(&s.sample_id).is_some_and(|t| activated.contains(t)))
            .collect();
        let mut after = before.clone();
        if !affected.is_empty() {
            let rerun = run_multistep(
                &affected,
                &types,
                &state.registry,
                &state.bank,
                &state.taxonomy,
                ctx.backend,
                &cfg.reasoner,
                cfg.parallelism,
            )?;
            let mut by_id: BTreeMap<String, ReasoningTrace> =
                rerun.into_iter().map(|t| (t.sample_id.clone(), t)).collect();
            for t in after.iter_mut() {
                if let Some(n) = by_id.remove(&t.sample_id) {
                    *t = n;
                }
            }
        }

        let (acc_before, ok_before) = per_type_multi_accuracy(ctx.corpus, &before, &types, cfg)?;
        let (mut acc_after, ok_after) = per_type_multi_accuracy(ctx.corpus, &after, &types, cfg)?;
        for qt in &activated {
            let (b, a) = (acc_before.get(qt).copied(), acc_after.get(qt).copied());
            let (Some(b), Some(a)) = (b, a) else { continue };
            if a >= b {
                continue;
            }
            let rb = state.registry.rollback(qt)?;
            actions.push(RoundAction {
                question_type: qt.clone(),
                action: Action::RolledBack,
                detail: format!("accuracy {b:.3} -> {a:.3}; v{} restored", rb.to_version),
            });
            let broken: Vec<String> = ok_before
                .iter()
                .filter(|(id, ok)| **ok && ok_after.get(*id) == Some(&false) && types.get(*id) == Some(qt))
                .map(|(id, _)| id.clone())
                .collect();
            let item_id = state.review.push(ReviewItem {
                item_id: String::new(),
                question_type: qt.clone(),
                trigger: ReviewTrigger::Regression,
                generation,
                exemplar_sample_ids: broken,
                options: ReviewOption::ALL.to_vec(),
                proposed_type: None,
                detail: format!("v{} lowered accuracy from {b:.3} to {a:.3}", rb.from_version),
                resolution: None,
                run_id: None,
            });
            actions.push(RoundAction {
                question_type: qt.clone(),
                action: Action::ReviewQueued,
                detail: item_id,
            });
            for (t, old) in after.iter_mut().zip(&before) {
                if types.get(&t.sample_id) == Some(qt) {
                    *t = old.clone();
                }
            }
            acc_after.insert(qt.clone(), b);
        }

        let proposed_any = actions.iter().any(|a| a.action == Action::Proposed);
        let tdfm_unchanged = out.last().is_some_and(|p| p.detection.tdfm_count == detection.tdfm_count);
        let stop_reason = if g == budget {
            Some(StopReason::Budget)
        } else if !proposed_any && tdfm_unchanged {
            Some(StopReason::Converged)
        } else if !proposed_any && !held.is_empty() {
            Some(StopReason::RegressionReview)
        } else {
            None
        };
        let partial = before.iter().chain(&after).any(|t| t.status == TraceStatus::Aborted);
        out.push(Generation {
            round: RefinementRound {
                generation,
                input_registry_snapshot,
                taxonomy_snapshot,
                per_type_accuracy_before: acc_before,
                per_type_accuracy_after: acc_after,
                actions,
                tdfm_count: detection.tdfm_count,
                fp_count: detection.fp_count,
                stop_reason,
                partial,
            },
            detection,
            multi_before: before,
            multi_after: after.clone(),
        });
        carried = Some(after);
        if stop_reason.is_some() {
            break;
        }
    }
    Ok(out)
}
