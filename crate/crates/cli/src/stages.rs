//! Pipeline stages behind `cotrel run --stage`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use clap::ValueEnum;
use cotrel::backend::{CachedBackend, ChatBackend, ResponseCache};
use cotrel::corpus::{self, Corpus, Dataset, Sample};
use cotrel::fpdetect::{detect_all, rerun_trace_id, DetectContext, DetectionReport};
use cotrel::metrics::accuracy;
use cotrel::reasoner::{bounded_pool, run_direct, run_multistep, ReasoningMode, ReasoningTrace, TraceStatus};
use cotrel::refine::{iterate, AppliedChange, RefineContext, RefinementRound};
use cotrel::taxonomy::{classify, classify_rule, TaxonomyError, TypeAssignment, TypeId};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ClassifyMode, RunConfig};
use crate::error::CliError;
use crate::ledger::{
    trace_id, Phase, RunLedger, TraceKind, TraceRecord, ASSIGNMENTS, CORPUS, DETECTION, REFINE_DETECTION,
    REFINE_TRACES, ROUNDS, TRACES, VERDICTS,
};
use crate::report;
use crate::workspace::{write_atomic, Workspace};

/// Samples reasoned per ledger flush.
const CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
pub enum Stage {
    Ingest,
    Classify,
    ReasonDirect,
    ReasonMultistep,
    Detect,
    Refine,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Classify => "classify",
            Stage::ReasonDirect => "reason-direct",
            Stage::ReasonMultistep => "reason-multistep",
            Stage::Detect => "detect",
            Stage::Refine => "refine",
            Stage::Report => "report",
        }
    }

    fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Ingest => &[],
            Stage::Classify | Stage::ReasonDirect => &[Stage::Ingest],
            Stage::ReasonMultistep => &[Stage::Ingest, Stage::Classify],
            Stage::Detect => &[Stage::Ingest, Stage::Classify, Stage::ReasonDirect, Stage::ReasonMultistep],
            Stage::Refine | Stage::Report => &[Stage::Detect],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Refinement ledger line: a generation's round or an operator's review decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record_type", rename_all = "snake_case")]
pub enum RoundEntry {
    Round(RefinementRound),
    ReviewResolution(ResolutionRecord),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolutionRecord {
    #[serde(flatten)]
    pub change: AppliedChange,
    pub note: String,
}

/// An opened run: workspace, effective config and ledger.
pub struct RunContext {
    pub ws: Workspace,
    pub cfg: RunConfig,
    pub ledger: RunLedger,
}

impl RunContext {
    pub fn open(ws: Workspace, cfg: RunConfig) -> Result<Self, CliError> {
        let ledger = RunLedger::open(
            &ws,
            &cfg.run_id,
            &cfg.digest(),
            serde_json::to_value(&cfg)?,
            cfg.deterministic(),
        )?;
        Ok(Self { ws, cfg, ledger })
    }

    pub fn backend(&self) -> Result<Arc<dyn ChatBackend>, CliError> {
        let inner = self.cfg.backend.build()?;
        Ok(match &self.cfg.cache_dir {
            Some(dir) => {
                let cache = ResponseCache::open(dir).map_err(CliError::io(dir))?;
                Arc::new(CachedBackend::new(inner, Some(cache)))
            }
            None => inner,
        })
    }

    pub fn corpus(&self) -> Result<Corpus, CliError> {
        Ok(corpus::read_normalized(self.ledger.path(CORPUS))?)
    }

    pub fn assignments(&self) -> Result<Vec<TypeAssignment>, CliError> {
        Ok(self.ledger.read(ASSIGNMENTS)?.into_iter().map(|e| e.record).collect())
    }

    /// The stage's own traces of one mode, in corpus order.
    pub fn primary_traces(&self, corpus: &Corpus, mode: ReasoningMode) -> Result<Vec<ReasoningTrace>, CliError> {
        let mut by_id: BTreeMap<String, ReasoningTrace> = self
            .ledger
            .traces(TraceKind::Primary, mode)?
            .into_iter()
            .map(|e| (e.record.trace.sample_id.clone(), e.record.trace))
            .collect();
        Ok(corpus.samples().iter().filter_map(|s| by_id.remove(&s.sample_id)).collect())
    }

    pub fn detection(&self) -> Result<DetectionReport, CliError> {
        let p = self.ledger.path(DETECTION);
        let text = std::fs::read_to_string(&p).map_err(CliError::io(&p))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn append_traces(
        &self,
        file: &str,
        kind: TraceKind,
        phase: Option<Phase>,
        generation: u32,
        traces: &[ReasoningTrace],
    ) -> Result<(), CliError> {
        self.ledger.append(
            file,
            generation,
            traces.iter().map(|t| TraceRecord {
                trace_id: match kind {
                    TraceKind::Rerun => rerun_trace_id(&t.sample_id, t.mode),
                    _ => trace_id(t, kind, generation),
                },
                kind,
                phase,
                trace: t.clone(),
            }),
        )
    }
}

/// Runs one stage and returns a one-paragraph summary for the operator.
pub fn run_stage(ctx: &RunContext, stage: Stage) -> Result<String, CliError> {
    for up in stage.upstream() {
        if !ctx.ledger.stage_done(up.name())? {
            return Err(CliError::UpstreamMissing(up.name()));
        }
    }
    // The report is rebuilt from the ledger on every call and adds no records.
    if stage != Stage::Report && ctx.ledger.stage_done(stage.name())? {
        return Ok(format!(
            "{stage} already complete for run `{}`; nothing written",
            ctx.ledger.run_id()
        ));
    }
    let msg = match stage {
        Stage::Ingest => ingest(ctx)?,
        Stage::Classify => classify_stage(ctx)?,
        Stage::ReasonDirect => reason_direct(ctx)?,
        Stage::ReasonMultistep => reason_multistep(ctx)?,
        Stage::Detect => detect(ctx)?,
        Stage::Refine => refine(ctx)?,
        Stage::Report => return report::write(ctx),
    };
    ctx.ledger.mark_done(stage.name())?;
    Ok(msg)
}

fn ingest(ctx: &RunContext) -> Result<String, CliError> {
    let d = &ctx.cfg.data;
    let ing = match d.dataset {
        Dataset::Aokvqa => corpus::load_aokvqa(&d.paths[0], d.split)?,
        Dataset::Okvqa => corpus::load_okvqa(&d.paths[0], &d.paths[1])?,
        Dataset::Fvqa => corpus::load_fvqa(&d.paths[0])?,
        Dataset::Synthetic => corpus::load_synthetic(&d.paths[0])?,
    };
    let bytes = corpus::to_normalized_string(&ing.corpus);
    write_atomic(&ctx.ledger.path(CORPUS), bytes.as_bytes())?;
    Ok(format!(
        "ingested {} {} samples ({} split); {} unknown field occurrence(s) ignored",
        ing.corpus.len(),
        ing.corpus.dataset,
        ing.corpus.split.as_str(),
        ing.unknown_field_count()
    ))
}

fn classify_stage(ctx: &RunContext) -> Result<String, CliError> {
    let corpus = ctx.corpus()?;
    let state = ctx.ws.load_state()?;
    let done: BTreeSet<String> = ctx.assignments()?.into_iter().map(|a| a.sample_id).collect();
    let todo: Vec<&Sample> = corpus.samples().iter().filter(|s| !done.contains(&s.sample_id)).collect();
    let results: Vec<Result<TypeAssignment, TaxonomyError>> = match ctx.cfg.reasoning.classify {
        ClassifyMode::Rule => todo.iter().map(|s| Ok(classify_rule(s))).collect(),
        ClassifyMode::Backend => {
            let backend = ctx.backend()?;
            bounded_pool(ctx.cfg.reasoning.parallelism)
                .install(|| todo.par_iter().map(|s| classify(s, &state.taxonomy, &*backend)).collect())
        }
    };
    let mut first_err = None;
    let mut fresh = Vec::new();
    for r in results {
        match r {
            Ok(a) => fresh.push(a),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    ctx.ledger.append(ASSIGNMENTS, 0, &fresh)?;
    if let Some(e) = first_err {
        return Err(e.into());
    }
    let mut dist: BTreeMap<TypeId, usize> = BTreeMap::new();
    for a in ctx.assignments()? {
        *dist.entry(a.question_type).or_default() += 1;
    }
    let parts: Vec<String> = dist.iter().map(|(t, n)| format!("{t}={n}")).collect();
    Ok(format!("classified {} samples ({} new): {}", done.len() + fresh.len(), fresh.len(), parts.join(" ")))
}

/// Keeps completed traces; returns how many were aborted.
fn keep_complete(traces: Vec<ReasoningTrace>) -> (Vec<ReasoningTrace>, usize) {
    let (ok, aborted): (Vec<_>, Vec<_>) = traces.into_iter().partition(|t| t.status == TraceStatus::Complete);
    (ok, aborted.len())
}

fn aborted_error(n: usize) -> CliError {
    CliError::Backend(format!(
        "{n} sample(s) could not be reasoned; completed traces are saved, rerun the stage to resume"
    ))
}

fn reasoning_summary(ctx: &RunContext, corpus: &Corpus, mode: ReasoningMode, fresh: usize) -> Result<String, CliError> {
    let traces = ctx.primary_traces(corpus, mode)?;
    let acc = accuracy::<f64>(&traces, corpus, ctx.cfg.reasoning.scheme)?;
    let label = match mode {
        ReasoningMode::Direct => "direct",
        ReasoningMode::Multistep => "multi-step",
    };
    Ok(format!(
        "{label} reasoning: {} traces ({fresh} new), accuracy {:.1}%",
        traces.len(),
        acc.value * 100.0
    ))
}

fn reason_direct(ctx: &RunContext) -> Result<String, CliError> {
    let corpus = ctx.corpus()?;
    let state = ctx.ws.load_state()?;
    let done = ctx.ledger.traced_ids(TraceKind::Primary, ReasoningMode::Direct)?;
    let todo: Vec<&Sample> = corpus.samples().iter().filter(|s| !done.contains(&s.sample_id)).collect();
    let backend = ctx.backend()?;
    let detect_cfg = ctx.cfg.detect();
    let extractor = detect_cfg.extractor(&*backend);
    let (mut fresh, mut aborted) = (0, 0);
    for chunk in todo.chunks(CHUNK) {
        let traces = run_direct(chunk, &state.bank, &*backend, &detect_cfg.reasoner, extractor, detect_cfg.parallelism);
        let (ok, bad) = keep_complete(traces);
        ctx.append_traces(TRACES, TraceKind::Primary, None, 1, &ok)?;
        fresh += ok.len();
        aborted += bad;
    }
    if aborted > 0 {
        return Err(aborted_error(aborted));
    }
    reasoning_summary(ctx, &corpus, ReasoningMode::Direct, fresh)
}

fn type_map(assignments: &[TypeAssignment]) -> BTreeMap<String, TypeId> {
    assignments
        .iter()
        .map(|a| (a.sample_id.clone(), a.question_type.clone()))
        .collect()
}

fn reason_multistep(ctx: &RunContext) -> Result<String, CliError> {
    let corpus = ctx.corpus()?;
    let state = ctx.ws.load_state()?;
    let types = type_map(&ctx.assignments()?);
    let done = ctx.ledger.traced_ids(TraceKind::Primary, ReasoningMode::Multistep)?;
    let todo: Vec<&Sample> = corpus.samples().iter().filter(|s| !done.contains(&s.sample_id)).collect();
    let backend = ctx.backend()?;
    let rcfg = ctx.cfg.reasoner();
    let (mut fresh, mut aborted) = (0, 0);
    for chunk in todo.chunks(CHUNK) {
        let traces = run_multistep(
            chunk,
            &types,
            &state.registry,
            &state.bank,
            &state.taxonomy,
            &*backend,
            &rcfg,
            ctx.cfg.reasoning.parallelism,
        )?;
        let (ok, bad) = keep_complete(traces);
        ctx.append_traces(TRACES, TraceKind::Primary, None, 1, &ok)?;
        fresh += ok.len();
        aborted += bad;
    }
    if aborted > 0 {
        return Err(aborted_error(aborted));
    }
    reasoning_summary(ctx, &corpus, ReasoningMode::Multistep, fresh)
}

fn detect(ctx: &RunContext) -> Result<String, CliError> {
    let corpus = ctx.corpus()?;
    let state = ctx.ws.load_state()?;
    let assignments = ctx.assignments()?;
    let direct = ctx.primary_traces(&corpus, ReasoningMode::Direct)?;
    let multi = ctx.primary_traces(&corpus, ReasoningMode::Multistep)?;
    let backend = ctx.backend()?;
    let detect_cfg = ctx.cfg.detect();
    let report = detect_all(&DetectContext {
        corpus: &corpus,
        direct: &direct,
        multi: &multi,
        assignments: &assignments,
        registry: &state.registry,
        bank: &state.bank,
        taxonomy: &state.taxonomy,
        backend: &*backend,
        config: &detect_cfg,
        generation: 1,
    })?;
    ctx.ledger.append(VERDICTS, 1, &report.verdicts)?;
    ctx.append_traces(TRACES, TraceKind::Rerun, None, 1, &report.reruns)?;
    write_atomic(&ctx.ledger.path(DETECTION), serde_json::to_string_pretty(&report)?.as_bytes())?;
    let mut msg = format!(
        "detect: {} TDFM samples; FP {} ({} unstable, {} persistent), recovered {}, TN {}",
        report.tdfm_count,
        report.fp_count,
        report.count(cotrel::fpdetect::VerdictState::FpMappingUnstable),
        report.count(cotrel::fpdetect::VerdictState::FpPersistent),
        report.recovered,
        report.tn_count
    );
    if report.degraded {
        msg.push_str(&format!("; {} abstained (degraded)", report.abstained));
    }
    Ok(msg)
}

fn refine(ctx: &RunContext) -> Result<String, CliError> {
    let corpus = ctx.corpus()?;
    let mut state = ctx.ws.load_state()?;
    let assignments = ctx.assignments()?;
    let direct = ctx.primary_traces(&corpus, ReasoningMode::Direct)?;
    let multi = ctx.primary_traces(&corpus, ReasoningMode::Multistep)?;
    let backend = ctx.backend()?;
    let detect_cfg = ctx.cfg.detect();
    let rctx = RefineContext {
        corpus: &corpus,
        direct: &direct,
        assignments: &assignments,
        backend: &*backend,
        detect: &detect_cfg,
        auto_accept: ctx.cfg.refine.auto_accept,
        analyze: ctx.cfg.refine.analyze,
    };
    let known = state.review.items().len();
    let generations = iterate(&rctx, &mut state, ctx.cfg.refine.budget, Some(multi))?;
    for item in &mut state.review.items_mut()[known..] {
        item.run_id = Some(ctx.cfg.run_id.clone());
    }

    for g in &generations {
        let n = g.round.generation;
        ctx.append_traces(REFINE_TRACES, TraceKind::Refine, Some(Phase::Before), n, &g.multi_before)?;
        ctx.append_traces(REFINE_TRACES, TraceKind::Refine, Some(Phase::After), n, &g.multi_after)?;
        ctx.ledger.append(REFINE_DETECTION, n, [&g.detection])?;
        ctx.ledger.append(ROUNDS, n, [RoundEntry::Round(g.round.clone())])?;
    }
    ctx.ws.save_state(&state)?;
    ctx.ws.append_review(&state.review.items()[known..])?;

    let mut msg = format!("refine: {} generation(s)", generations.len());
    for g in &generations {
        let r = &g.round;
        msg.push_str(&format!(
            "\n  g{}: TDFM {} FP {}; {} activated, {} rolled back, {} queued for review",
            r.generation,
            r.tdfm_count,
            r.fp_count,
            r.count(cotrel::refine::Action::Activated),
            r.count(cotrel::refine::Action::RolledBack),
            r.count(cotrel::refine::Action::ReviewQueued),
        ));
        if let Some(stop) = r.stop_reason {
            msg.push_str(&format!(" (stop: {stop:?})"));
        }
    }
    Ok(msg)
}

/// Refinement records grouped by generation, for reporting.
pub struct RefineHistory {
    pub rounds: Vec<RefinementRound>,
    pub detections: BTreeMap<u32, DetectionReport>,
    pub before: BTreeMap<u32, Vec<ReasoningTrace>>,
    pub after: BTreeMap<u32, Vec<ReasoningTrace>>,
}

impl RunContext {
    pub fn refine_history(&self) -> Result<RefineHistory, CliError> {
        let rounds = self
            .ledger
            .read::<RoundEntry>(ROUNDS)?
            .into_iter()
            .filter_map(|e| match e.record {
                RoundEntry::Round(r) => Some(r),
                RoundEntry::ReviewResolution(_) => None,
            })
            .collect();
        let detections = self
            .ledger
            .read::<DetectionReport>(REFINE_DETECTION)?
            .into_iter()
            .map(|e| (e.generation, e.record))
            .collect();
        let (mut before, mut after): (BTreeMap<u32, Vec<_>>, BTreeMap<u32, Vec<_>>) = Default::default();
        for e in self.ledger.read::<TraceRecord>(REFINE_TRACES)? {
            let map = if e.record.phase == Some(Phase::After) { &mut after } else { &mut before };
            map.entry(e.generation).or_default().push(e.record.trace);
        }
        Ok(RefineHistory {
            rounds,
            detections,
            before,
            after,
        })
    }
}
