//! False-positive adjudication of samples that are right under direct
//! reasoning and wrong under multi-step reasoning (TDFM samples).
//!
//! Each TDFM sample ends in exactly one state:
//!
//! | state                 | condition                                              |
//! |-----------------------|--------------------------------------------------------|
//! | `FP_MAPPING_UNSTABLE` | direct and multi-step paths already agree              |
//! | `NONFP_RECOVERED`     | after one realigned rerun both modes are right, paths agree |
//! | `FP_PERSISTENT`       | the realigned rerun is still wrong or still diverges   |
//! | `ABSTAINED`           | no realignment could be run                            |

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{ChatBackend, Route};
use crate::corpus::{Corpus, Sample};
use crate::cot::{propose_template, CotTemplate, Provenance, TemplateRegistry};
use crate::metrics::{is_correct, MatchScheme, MetricsError};
use crate::reasoner::{
    bounded_pool, extract_path, path_equal, reason_direct, reason_multistep, PathExtractor, ReasonerConfig, ReasonerError,
    ReasoningMode, ReasoningTrace, TraceStatus,
};
use crate::taxonomy::{SqId, SubQuestionBank, Taxonomy, TypeAssignment, TypeId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FpError {
    #[error("traces missing for: {}", .0.join(", "))]
    MissingTrace(Vec<String>),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VerdictState {
    NotTdfm,
    FpMappingUnstable,
    FpPersistent,
    NonfpRecovered,
    Abstained,
}

impl VerdictState {
    pub fn is_fp(self) -> bool {
        matches!(self, VerdictState::FpMappingUnstable | VerdictState::FpPersistent)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evidence {
    pub direct_path: Vec<SqId>,
    pub multi_path: Vec<SqId>,
    pub paths_equal: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub realigned_template: Option<CotTemplate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rerun_trace_ids: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cause: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub sample_id: String,
    pub state: VerdictState,
    pub evidence: Evidence,
    pub generation: u32,
}

/// Which adjudicated samples count as true negatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum TnDefinition {
    /// Recovered TDFM samples plus samples right in both modes with equal paths.
    #[default]
    RecoveredPlusStable,
    RecoveredOnly,
}

impl TnDefinition {
    pub fn id(self) -> &'static str {
        match self {
            TnDefinition::RecoveredPlusStable => "recovered_plus_stable",
            TnDefinition::RecoveredOnly => "recovered_only",
        }
    }
}

impl fmt::Display for TnDefinition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for TnDefinition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "recovered_plus_stable" => Ok(TnDefinition::RecoveredPlusStable),
            "recovered_only" => Ok(TnDefinition::RecoveredOnly),
            other => Err(format!("unknown TN definition `{other}`")),
        }
    }
}

impl Serialize for TnDefinition {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.id())
    }
}

impl<'de> Deserialize<'de> for TnDefinition {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathMode {
    #[default]
    Rule,
    Backend,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectConfig {
    pub tau: f64,
    pub scheme: MatchScheme,
    pub tn_definition: TnDefinition,
    pub path_mode: PathMode,
    pub reasoner: ReasonerConfig,
    pub parallelism: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            scheme: MatchScheme::ExactNorm,
            tn_definition: TnDefinition::default(),
            path_mode: PathMode::Rule,
            reasoner: ReasonerConfig::default(),
            parallelism: 4,
        }
    }
}

impl DetectConfig {
    pub fn extractor<'a>(&self, backend: &'a dyn ChatBackend) -> PathExtractor<'a> {
        match self.path_mode {
            PathMode::Rule => PathExtractor::Rule,
            PathMode::Backend => PathExtractor::Backend(backend),
        }
    }
}

fn completed(traces: &[ReasoningTrace]) -> BTreeMap<&str, &ReasoningTrace> {
    traces.iter().map(|t| (t.sample_id.as_str(), t)).collect()
}

/// Ids of samples answered correctly by the direct run and incorrectly by the
/// multi-step run. Aborted traces never qualify.
pub fn find_tdfm(
    direct: &[ReasoningTrace],
    multi: &[ReasoningTrace],
    corpus: &Corpus,
    scheme: MatchScheme,
) -> Result<BTreeSet<String>, FpError> {
    let d = completed(direct);
    let m = completed(multi);
    let missing: Vec<String> = corpus
        .samples()
        .iter()
        .map(|s| s.sample_id.as_str())
        .filter(|id| !d.contains_key(id) || !m.contains_key(id))
        .map(str::to_string)
        .collect();
    if !missing.is_empty() {
        return Err(FpError::MissingTrace(missing));
    }
    let mut out = BTreeSet::new();
    for s in corpus.samples() {
        let (dt, mt) = (d[s.sample_id.as_str()], m[s.sample_id.as_str()]);
        if dt.status == TraceStatus::Aborted || mt.status == TraceStatus::Aborted {
            continue;
        }
        if is_correct(&dt.final_answer_raw, s, scheme)? && !is_correct(&mt.final_answer_raw, s, scheme)? {
            out.insert(s.sample_id.clone());
        }
    }
    Ok(out)
}

/// Path of a direct trace, extracting it when the trace does not carry one.
pub fn direct_path(trace: &ReasoningTrace, bank: &SubQuestionBank, extractor: PathExtractor<'_>) -> Vec<SqId> {
    if trace.path_signature.is_empty() {
        extract_path(trace, bank, extractor)
    } else {
        trace.path_signature.clone()
    }
}

/// Everything read by the adjudicator.
#[derive(Clone, Copy)]
pub struct DetectContext<'a> {
    pub corpus: &'a Corpus,
    pub direct: &'a [ReasoningTrace],
    pub multi: &'a [ReasoningTrace],
    pub assignments: &'a [TypeAssignment],
    pub registry: &'a TemplateRegistry,
    pub bank: &'a SubQuestionBank,
    pub taxonomy: &'a Taxonomy,
    pub backend: &'a dyn ChatBackend,
    pub config: &'a DetectConfig,
    pub generation: u32,
}

/// A verdict plus any rerun traces produced while reaching it.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjudication {
    pub verdict: Verdict,
    pub reruns: Vec<ReasoningTrace>,
}

pub fn rerun_trace_id(sample_id: &str, mode: ReasoningMode) -> String {
    match mode {
        ReasoningMode::Direct => format!("{sample_id}:rerun:direct"),
        ReasoningMode::Multistep => format!("{sample_id}:rerun:multistep"),
    }
}

fn answered(result: Result<ReasoningTrace, ReasonerError>) -> Result<ReasoningTrace, String> {
    match result {
        Ok(t) if t.status == TraceStatus::Aborted => Err("rerun aborted by the backend".into()),
        Ok(t) => Ok(t),
        // An unparseable answer is scored like a wrong one.
        Err(ReasonerError::UnparseableAnswer { partial, .. }) => Ok(*partial),
        Err(e) => Err(e.to_string()),
    }
}

/// Adjudicates one TDFM sample.
pub fn adjudicate(
    sample: &Sample,
    qt: &TypeId,
    d_trace: &ReasoningTrace,
    m_trace: &ReasoningTrace,
    ctx: &DetectContext<'_>,
) -> Result<Adjudication, FpError> {
    let cfg = ctx.config;
    let extractor = cfg.extractor(ctx.backend);
    let d_path = direct_path(d_trace, ctx.bank, extractor);
    let m_path = m_trace.path_signature.clone();
    let paths_equal = path_equal(&d_path, &m_path, cfg.tau);
    let mut evidence = Evidence {
        direct_path: d_path,
        multi_path: m_path,
        paths_equal,
        realigned_template: None,
        rerun_trace_ids: None,
        cause: None,
    };
    let verdict = |state, evidence| Verdict {
        sample_id: sample.sample_id.clone(),
        state,
        evidence,
        generation: ctx.generation,
    };
    if paths_equal {
        return Ok(Adjudication {
            verdict: verdict(VerdictState::FpMappingUnstable, evidence),
            reruns: Vec::new(),
        });
    }
    let abstain = |mut evidence: Evidence, cause: String| {
        log::warn!("abstaining on {}: {cause}", sample.sample_id);
        evidence.cause = Some(cause);
        Ok(Adjudication {
            verdict: verdict(VerdictState::Abstained, evidence),
            reruns: Vec::new(),
        })
    };

    let active = ctx.registry.active(qt);
    let realigned = propose_template(
        qt,
        &[(sample, d_trace)],
        ctx.bank,
        ctx.taxonomy,
        ctx.backend,
        &Route::new(&sample.sample_id, "realign"),
        ctx.registry.next_version(qt),
        active.as_ref().map(|t| t.version),
        Provenance::Realigned,
    );
    let realigned = match realigned {
        Ok(t) => t,
        Err(e) => return abstain(evidence, e.to_string()),
    };
    evidence.realigned_template = Some(realigned.clone());

    let rerun_m = reason_multistep(sample, qt, &realigned, ctx.bank, ctx.backend, &cfg.reasoner);
    let mut rerun_m = match answered(rerun_m) {
        Ok(t) => t,
        Err(cause) => return abstain(evidence, cause),
    };
    let mut rerun_d = match answered(reason_direct(sample, ctx.backend, &cfg.reasoner)) {
        Ok(t) => t,
        Err(cause) => return abstain(evidence, cause),
    };
    rerun_d.path_signature = extract_path(&rerun_d, ctx.bank, extractor);
    let m_ok = rerun_m.score(sample, cfg.scheme)?.unwrap_or(false);
    let d_ok = rerun_d.score(sample, cfg.scheme)?.unwrap_or(false);
    let rerun_equal = path_equal(&rerun_d.path_signature, &rerun_m.path_signature, cfg.tau);
    evidence.rerun_trace_ids = Some(vec![
        rerun_trace_id(&sample.sample_id, ReasoningMode::Direct),
        rerun_trace_id(&sample.sample_id, ReasoningMode::Multistep),
    ]);
    let state = if m_ok && d_ok && rerun_equal {
        VerdictState::NonfpRecovered
    } else {
        VerdictState::FpPersistent
    };
    Ok(Adjudication {
        verdict: verdict(state, evidence),
        reruns: vec![rerun_d, rerun_m],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub generation: u32,
    pub fp_count: usize,
    pub tn_count: usize,
    pub tdfm_count: usize,
    pub abstained: usize,
    pub recovered: usize,
    /// Samples right in both modes whose paths agree.
    pub stable_correct: usize,
    pub tn_definition: TnDefinition,
    /// Set when at least one TDFM sample could not be adjudicated.
    pub degraded: bool,
    pub verdicts: Vec<Verdict>,
    /// Rerun traces, direct then multi-step, in sample order.
    #[serde(skip)]
    pub reruns: Vec<ReasoningTrace>,
}

impl DetectionReport {
    pub fn verdict(&self, sample_id: &str) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.sample_id == sample_id)
    }

    pub fn count(&self, state: VerdictState) -> usize {
        self.verdicts.iter().filter(|v| v.state == state).count()
    }
}

/// Adjudicates every TDFM sample of a direct/multi-step run pair.
pub fn detect_all(ctx: &DetectContext<'_>) -> Result<DetectionReport, FpError> {
    let cfg = ctx.config;
    let tdfm = find_tdfm(ctx.direct, ctx.multi, ctx.corpus, cfg.scheme)?;
    let d = completed(ctx.direct);
    let m = completed(ctx.multi);
    let types: BTreeMap<&str, &TypeId> = ctx
        .assignments
        .iter()
        .map(|a| (a.sample_id.as_str(), &a.question_type))
        .collect();

    let pool = bounded_pool(cfg.parallelism);
    let ids: Vec<&String> = tdfm.iter().collect();
    let results: Vec<Result<Adjudication, FpError>> = pool.install(|| {
        ids.par_iter()
            .map(|id| {
                let sample = ctx.corpus.get(id).expect("tdfm ids come from the corpus");
                let (dt, mt) = (d[id.as_str()], m[id.as_str()]);
                let qt = mt
                    .question_type
                    .as_ref()
                    .or_else(|| types.get(id.as_str()).copied())
                    .cloned()
                    .unwrap_or_else(|| TypeId::from(TypeId::OLR));
                adjudicate(sample, &qt, dt, mt, ctx)
            })
            .collect()
    });
    let mut verdicts = Vec::with_capacity(results.len());
    let mut reruns = Vec::new();
    for r in results {
        let a = r?;
        verdicts.push(a.verdict);
        reruns.extend(a.reruns);
    }

    let extractor = cfg.extractor(ctx.backend);
    let mut stable_correct = 0;
    for s in ctx.corpus.samples() {
        let (dt, mt) = (d[s.sample_id.as_str()], m[s.sample_id.as_str()]);
        if dt.status != TraceStatus::Complete || mt.status != TraceStatus::Complete {
            continue;
        }
        if is_correct(&dt.final_answer_raw, s, cfg.scheme)?
            && is_correct(&mt.final_answer_raw, s, cfg.scheme)?
            && path_equal(&direct_path(dt, ctx.bank, extractor), &mt.path_signature, cfg.tau)
        {
            stable_correct += 1;
        }
    }

    let count = |st: VerdictState| verdicts.iter().filter(|v| v.state == st).count();
    let recovered = count(VerdictState::NonfpRecovered);
    let abstained = count(VerdictState::Abstained);
    let tn_count = match cfg.tn_definition {
        TnDefinition::RecoveredPlusStable => recovered + stable_correct,
        TnDefinition::RecoveredOnly => recovered,
    };
    Ok(DetectionReport {
        generation: ctx.generation,
        fp_count: count(VerdictState::FpMappingUnstable) + count(VerdictState::FpPersistent),
        tn_count,
        tdfm_count: tdfm.len(),
        abstained,
        recovered,
        stable_correct,
        tn_definition: cfg.tn_definition,
        degraded: abstained > 0,
        verdicts,
        reruns,
    })
}
