//! Answer matching, accuracy and the VoC reliability score.
//!
//! VoC combines multi-step accuracy `P`, direct accuracy `Q` and the
//! confirmed-reliable rate `TN / (FP + TN)`:
//!
//! ```text
//! VoC = 100 · (P − Q) · P · TN / (FP + TN)
//! ```
//!
//! `P` and `Q` are fractions; the score is reported at ×100 scale. All
//! numeric functions are generic over [`Scalar`] so the same code serves
//! `f32` and `f64`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Sample};
use crate::fpdetect::TnDefinition;
use crate::reasoner::{ReasoningTrace, TraceStatus};
use crate::scalar::Scalar;
use crate::taxonomy::{Taxonomy, TypeAssignment, TypeId};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("scheme {scheme} cannot score sample {sample_id}: it has no answer choices")]
    SchemeMismatch { scheme: MatchScheme, sample_id: String },
    #[error("accuracy undefined: no scored samples")]
    UndefinedAccuracy,
    #[error("VoC undefined: FP + TN = 0")]
    VocUndefined,
    #[error("invalid matching scheme `{0}`")]
    InvalidScheme(String),
}

/// Lowercases, removes punctuation, drops leading articles and collapses
/// whitespace. Idempotent.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let cleaned: String = lowered
        .chars()
        .filter(|c| *c != '\'' && *c != '’')
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect();
    let mut words = cleaned.split_whitespace().peekable();
    while matches!(words.peek(), Some(&("a" | "an" | "the"))) {
        words.next();
    }
    words.collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[derive(Default)]
pub enum MatchScheme {
    #[default]
    ExactNorm,
    Choice,
    TopK(usize),
    Soft3,
}

impl MatchScheme {
    pub fn id(&self) -> String {
        self.to_string()
    }
}


impl fmt::Display for MatchScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MatchScheme::ExactNorm => f.write_str("exact_norm"),
            MatchScheme::Choice => f.write_str("choice"),
            MatchScheme::TopK(k) => write!(f, "top{k}"),
            MatchScheme::Soft3 => f.write_str("soft3"),
        }
    }
}

impl FromStr for MatchScheme {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        match lower.as_str() {
            "exact_norm" | "exact" => Ok(MatchScheme::ExactNorm),
            "choice" => Ok(MatchScheme::Choice),
            "soft3" => Ok(MatchScheme::Soft3),
            _ => lower
                .strip_prefix("top")
                .and_then(|k| k.trim_start_matches(['_', '-']).parse::<usize>().ok())
                .filter(|k| *k >= 1)
                .map(MatchScheme::TopK)
                .ok_or_else(|| MetricsError::InvalidScheme(s.to_string())),
        }
    }
}

impl Serialize for MatchScheme {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for MatchScheme {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Splits a ranked prediction list (`a; b; c` or one per line).
pub fn ranked_predictions(pred: &str) -> Vec<&str> {
    pred.split([';', '\n'])
        .map(|p| {
            let p = p.trim();
            // drop "1." / "2)" list markers
            match p.split_once(['.', ')']) {
                Some((n, rest)) if !n.is_empty() && n.chars().all(|c| c.is_ascii_digit()) => rest.trim(),
                _ => p,
            }
        })
        .filter(|p| !p.is_empty())
        .collect()
}

fn exact_norm(pred: &str, sample: &Sample) -> bool {
    let p = normalize_answer(pred);
    !p.is_empty() && sample.gold_answers.iter().any(|g| normalize_answer(g) == p)
}

/// Resolves a choice answer given verbatim or as an option letter (`C`, `(c)`, `c.`).
pub fn resolve_choice(pred: &str, choices: &[String]) -> Option<usize> {
    let p = normalize_answer(pred);
    if let Some(i) = choices.iter().position(|c| normalize_answer(c) == p) {
        return Some(i);
    }
    let trimmed = pred.trim().trim_matches(|c: char| matches!(c, '(' | ')' | '.' | ':' | ' '));
    let mut chars = trimmed.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) if c.is_ascii_alphabetic() => {
            let idx = (c.to_ascii_lowercase() as u8 - b'a') as usize;
            (idx < choices.len()).then_some(idx)
        }
        _ => None,
    }
}

/// Scores one prediction against a sample's gold answers, in `[0, 1]`.
pub fn match_answer<T: Scalar>(pred: &str, sample: &Sample, scheme: MatchScheme) -> Result<T, MetricsError> {
    let hit = |b: bool| if b { T::one() } else { T::zero() };
    match scheme {
        MatchScheme::ExactNorm => Ok(hit(exact_norm(pred, sample))),
        MatchScheme::Choice => {
            let choices = sample.choices.as_deref().ok_or_else(|| MetricsError::SchemeMismatch {
                scheme,
                sample_id: sample.sample_id.clone(),
            })?;
            Ok(hit(resolve_choice(pred, choices).is_some_and(|i| Some(i) == sample.gold_choice_index)))
        }
        MatchScheme::TopK(k) => Ok(hit(ranked_predictions(pred)
            .into_iter()
            .take(k)
            .any(|p| exact_norm(p, sample)))),
        MatchScheme::Soft3 => {
            let p = normalize_answer(pred);
            let n = sample
                .gold_answers
                .iter()
                .filter(|g| !p.is_empty() && normalize_answer(g) == p)
                .count();
            Ok((T::from_count(n) / T::lit(3.0)).min(T::one()))
        }
    }
}

/// Match score as a correctness flag (any score above zero counts for SOFT3).
pub fn is_correct(pred: &str, sample: &Sample, scheme: MatchScheme) -> Result<bool, MetricsError> {
    match_answer::<f64>(pred, sample, scheme).map(|s| s > 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy<T> {
    pub value: T,
    pub scored: usize,
    /// Traces excluded because their run was aborted.
    pub aborted: usize,
}

/// Mean match score over completed traces of samples in the corpus.
pub fn accuracy<T: Scalar>(
    traces: &[ReasoningTrace],
    corpus: &Corpus,
    scheme: MatchScheme,
) -> Result<Accuracy<T>, MetricsError> {
    let index = corpus.index();
    let mut sum = T::zero();
    let mut scored = 0;
    let mut aborted = 0;
    for t in traces {
        let Some(sample) = index.get(t.sample_id.as_str()) else {
            continue;
        };
        if t.status == TraceStatus::Aborted {
            aborted += 1;
            continue;
        }
        sum = sum + match_answer::<T>(&t.final_answer_raw, sample, scheme)?;
        scored += 1;
    }
    if scored == 0 {
        return Err(MetricsError::UndefinedAccuracy);
    }
    Ok(Accuracy {
        value: sum / T::from_count(scored),
        scored,
        aborted,
    })
}

fn tn_rate<T: Scalar>(fp: T, tn: T) -> Result<T, MetricsError> {
    let denom = fp + tn;
    if denom <= T::zero() {
        return Err(MetricsError::VocUndefined);
    }
    Ok(tn / denom)
}

/// VoC at ×100 scale. `fp` and `tn` are counts, accepted as scalars so the
/// derivative in FP can treat them as continuous.
pub fn voc<T: Scalar>(p: T, q: T, fp: T, tn: T) -> Result<T, MetricsError> {
    Ok(T::hundred() * (p - q) * p * tn_rate(fp, tn)?)
}

/// ∂VoC/∂P at ×100 scale: `100 · (2P − Q) · TN / (FP + TN)`.
pub fn dvoc_dp<T: Scalar>(p: T, q: T, fp: T, tn: T) -> Result<T, MetricsError> {
    Ok(T::hundred() * (T::lit(2.0) * p - q) * tn_rate(fp, tn)?)
}

/// ∂VoC/∂FP at ×100 scale: `100 · (Q − P) · P · TN / (FP + TN)²`.
pub fn dvoc_dfp<T: Scalar>(p: T, q: T, fp: T, tn: T) -> Result<T, MetricsError> {
    let denom = fp + tn;
    if denom <= T::zero() {
        return Err(MetricsError::VocUndefined);
    }
    Ok(T::hundred() * (q - p) * p * tn / (denom * denom))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeAccuracy<T> {
    pub n: usize,
    pub accuracy_direct: Option<T>,
    pub accuracy_multi: Option<T>,
}

/// Summary of one reasoning generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics<T> {
    /// Multi-step accuracy.
    #[serde(rename = "P")]
    pub p: T,
    /// Direct accuracy.
    #[serde(rename = "Q")]
    pub q: T,
    pub fp_count: usize,
    pub tn_count: usize,
    pub tdfm_count: usize,
    /// ×100 scale; `None` when FP + TN = 0.
    pub voc: Option<T>,
    /// Unscaled value of the same quantity.
    pub voc_raw: Option<T>,
    pub voc_undefined: bool,
    pub per_type: BTreeMap<TypeId, TypeAccuracy<T>>,
    pub scheme: MatchScheme,
    pub tn_definition: TnDefinition,
}

impl<T: Scalar> RunMetrics<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn compute(
        corpus: &Corpus,
        direct: &[ReasoningTrace],
        multi: &[ReasoningTrace],
        assignments: &[TypeAssignment],
        fp_count: usize,
        tn_count: usize,
        tdfm_count: usize,
        scheme: MatchScheme,
        tn_definition: TnDefinition,
    ) -> Result<Self, MetricsError> {
        let q = accuracy::<T>(direct, corpus, scheme)?.value;
        let p = accuracy::<T>(multi, corpus, scheme)?.value;
        let voc_value = voc(p, q, T::from_count(fp_count), T::from_count(tn_count)).ok();
        Ok(Self {
            p,
            q,
            fp_count,
            tn_count,
            tdfm_count,
            voc: voc_value,
            voc_raw: voc_value.map(|v| v / T::hundred()),
            voc_undefined: voc_value.is_none(),
            per_type: per_type_accuracy(corpus, direct, multi, assignments, scheme)?,
            scheme,
            tn_definition,
        })
    }
}

fn correct_by_sample<T: Scalar>(
    traces: &[ReasoningTrace],
    index: &BTreeMap<&str, &Sample>,
    scheme: MatchScheme,
) -> Result<HashMap<String, T>, MetricsError> {
    let mut out = HashMap::new();
    for t in traces.iter().filter(|t| t.status == TraceStatus::Complete) {
        if let Some(s) = index.get(t.sample_id.as_str()) {
            out.insert(t.sample_id.clone(), match_answer::<T>(&t.final_answer_raw, s, scheme)?);
        }
    }
    Ok(out)
}

fn mean_over<T: Scalar>(ids: &[&str], scores: &HashMap<String, T>) -> Option<T> {
    let vals: Vec<T> = ids.iter().filter_map(|id| scores.get(*id).copied()).collect();
    if vals.is_empty() {
        return None;
    }
    Some(vals.iter().fold(T::zero(), |a, b| a + *b) / T::from_count(vals.len()))
}

/// Accuracy of each mode per assigned question type.
pub fn per_type_accuracy<T: Scalar>(
    corpus: &Corpus,
    direct: &[ReasoningTrace],
    multi: &[ReasoningTrace],
    assignments: &[TypeAssignment],
    scheme: MatchScheme,
) -> Result<BTreeMap<TypeId, TypeAccuracy<T>>, MetricsError> {
    let index = corpus.index();
    let d = correct_by_sample::<T>(direct, &index, scheme)?;
    let m = correct_by_sample::<T>(multi, &index, scheme)?;
    let mut groups: BTreeMap<TypeId, Vec<&str>> = BTreeMap::new();
    for a in assignments.iter().filter(|a| index.contains_key(a.sample_id.as_str())) {
        groups.entry(a.question_type.clone()).or_default().push(a.sample_id.as_str());
    }
    Ok(groups
        .into_iter()
        .map(|(ty, ids)| {
            (
                ty,
                TypeAccuracy {
                    n: ids.len(),
                    accuracy_direct: mean_over(&ids, &d),
                    accuracy_multi: mean_over(&ids, &m),
                },
            )
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyRow<T> {
    pub question_type: TypeId,
    pub count: usize,
    pub share: T,
    /// Error rate under direct reasoning.
    pub difficulty_direct: Option<T>,
    /// Error rate under multi-step reasoning.
    pub difficulty_multi: Option<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyReport<T> {
    pub rows: Vec<DifficultyRow<T>>,
    /// Custom types folded into their builtin ancestor.
    pub aggregated: Vec<DifficultyRow<T>>,
    /// Active types with no samples.
    pub omitted: Vec<TypeId>,
}

/// Per-type sample share and error rate, in taxonomy order.
pub fn difficulty_report<T: Scalar>(
    corpus: &Corpus,
    direct: &[ReasoningTrace],
    multi: &[ReasoningTrace],
    assignments: &[TypeAssignment],
    taxonomy: &Taxonomy,
    scheme: MatchScheme,
) -> Result<DifficultyReport<T>, MetricsError> {
    let index = corpus.index();
    let d = correct_by_sample::<T>(direct, &index, scheme)?;
    let m = correct_by_sample::<T>(multi, &index, scheme)?;
    let total = T::from_count(corpus.len().max(1));
    let assigned: Vec<&TypeAssignment> = assignments
        .iter()
        .filter(|a| index.contains_key(a.sample_id.as_str()))
        .collect();

    let row = |ty: &TypeId, ids: &[&str]| DifficultyRow {
        question_type: ty.clone(),
        count: ids.len(),
        share: T::from_count(ids.len()) / total,
        difficulty_direct: mean_over(ids, &d).map(|a| T::one() - a),
        difficulty_multi: mean_over(ids, &m).map(|a| T::one() - a),
    };

    let mut rows = Vec::new();
    let mut omitted = Vec::new();
    let mut rolled: BTreeMap<&TypeId, Vec<&str>> = BTreeMap::new();
    for qt in taxonomy.types() {
        let ids: Vec<&str> = assigned
            .iter()
            .filter(|a| a.question_type == qt.id)
            .map(|a| a.sample_id.as_str())
            .collect();
        rolled
            .entry(taxonomy.root_of(&qt.id))
            .or_default()
            .extend(ids.iter().copied());
        if ids.is_empty() {
            omitted.push(qt.id.clone());
        } else {
            rows.push(row(&qt.id, &ids));
        }
    }
    let aggregated = taxonomy
        .types()
        .iter()
        .filter_map(|qt| rolled.get(&qt.id).filter(|ids| !ids.is_empty()).map(|ids| row(&qt.id, ids)))
        .collect();
    Ok(DifficultyReport {
        rows,
        aggregated,
        omitted,
    })
}

/// Number of completed traces whose normalized answer has two or more words
/// while every gold answer is a single word.
pub fn long_answer_count(traces: &[ReasoningTrace], corpus: &Corpus) -> usize {
    let index = corpus.index();
    traces
        .iter()
        .filter(|t| t.status == TraceStatus::Complete)
        .filter(|t| {
            let Some(s) = index.get(t.sample_id.as_str()) else {
                return false;
            };
            normalize_answer(&t.final_answer_raw).split(' ').count() >= 2
                && s.gold_answers
                    .iter()
                    .all(|g| normalize_answer(g).split(' ').filter(|w| !w.is_empty()).count() == 1)
        })
        .count()
}

/// One row of the Acc / VoC / FP / TDFM summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow<T> {
    pub label: String,
    pub accuracy: T,
    pub voc: Option<T>,
    pub fp: Option<usize>,
    pub tdfm: Option<usize>,
}

/// Markdown table with Acc (percent), VoC, FP and TDFM columns.
pub fn render_summary_table<T: Scalar>(rows: &[SummaryRow<T>]) -> String {
    let mut out = String::from("| Run | Acc | VoC | FP | TDFM |\n|---|---:|---:|---:|---:|\n");
    let dash = || "--".to_string();
    for r in rows {
        out.push_str(&format!(
            "| {} | {:.1} | {} | {} | {} |\n",
            r.label,
            (r.accuracy * T::hundred()).to_f64().unwrap_or(f64::NAN),
            r.voc.map_or_else(dash, |v| format!("{:.2}", v.to_f64().unwrap_or(f64::NAN))),
            r.fp.map_or_else(dash, |v| v.to_string()),
            r.tdfm.map_or_else(dash, |v| v.to_string()),
        ));
    }
    out
}

pub fn render_difficulty_table<T: Scalar>(report: &DifficultyReport<T>) -> String {
    let pct = |v: Option<T>| v.map_or("--".to_string(), |x| format!("{:.3}", x.to_f64().unwrap_or(f64::NAN)));
    let mut out = String::from("| Type | n | Share | Difficulty (direct) | Difficulty (multi-step) |\n|---|---:|---:|---:|---:|\n");
    for r in &report.rows {
        out.push_str(&format!(
            "| {} | {} | {:.3} | {} | {} |\n",
            r.question_type,
            r.count,
            r.share.to_f64().unwrap_or(f64::NAN),
            pct(r.difficulty_direct),
            pct(r.difficulty_multi)
        ));
    }
    if !report.omitted.is_empty() {
        let names: Vec<_> = report.omitted.iter().map(|t| t.as_str()).collect();
        out.push_str(&format!("\nTypes without samples: {}\n", names.join(", ")));
    }
    out
}
