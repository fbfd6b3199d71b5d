use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, ChatBackend, ChatTurn, Route};
use crate::cot::{chain_tag, seed_template, CotTemplate, TemplateRegistry};
use crate::corpus::Sample;
use crate::metrics::{is_correct, normalize_answer, MatchScheme, MetricsError};
use crate::taxonomy::{SqId, SubQuestionBank, Taxonomy, TypeId};

/// Label given to rationale lines that map to no sub-question.
pub const OTHER: &str = "other";
const MARKER: &str = "ANSWER:";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReasonerError {
    #[error("no `ANSWER:` line for {sample_id} at stage {stage} after a reformat retry")]
    UnparseableAnswer {
        sample_id: String,
        stage: String,
        /// What was collected before giving up; the answer fields are empty.
        partial: Box<ReasoningTrace>,
    },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("template for `{template}` cannot be used for a sample typed `{requested}`")]
    TemplateMismatch { requested: TypeId, template: TypeId },
    #[error("sub-question `{0}` is not in the bank")]
    UnknownSubQuestion(SqId),
    #[error("sample `{0}` has no question type assignment")]
    MissingAssignment(String),
    #[error("no template available for `{0}`")]
    NoTemplate(TypeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ReasoningMode {
    Direct,
    Multistep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TraceStatus {
    Complete,
    /// The backend failed mid-conversation; excluded from metrics.
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningStep {
    pub label: String,
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub sample_id: String,
    pub mode: ReasoningMode,
    pub question_type: Option<TypeId>,
    pub template_version: Option<u32>,
    pub steps: Vec<ReasoningStep>,
    pub rationale_raw: String,
    pub final_answer_raw: String,
    pub final_answer_norm: String,
    pub path_signature: Vec<SqId>,
    pub correct: Option<bool>,
    pub status: TraceStatus,
}

impl ReasoningTrace {
    /// A completed direct trace with a one-line rationale and no path.
    pub fn direct_stub(sample_id: &str, answer: &str) -> Self {
        Self {
            sample_id: sample_id.into(),
            mode: ReasoningMode::Direct,
            question_type: None,
            template_version: None,
            steps: Vec::new(),
            rationale_raw: answer.into(),
            final_answer_raw: answer.into(),
            final_answer_norm: normalize_answer(answer),
            path_signature: Vec::new(),
            correct: None,
            status: TraceStatus::Complete,
        }
    }

    pub fn set_answer(&mut self, raw: &str) {
        self.final_answer_raw = raw.to_string();
        self.final_answer_norm = normalize_answer(raw);
    }

    /// Fills `correct` for completed traces; aborted traces stay unscored.
    pub fn score(&mut self, sample: &Sample, scheme: MatchScheme) -> Result<Option<bool>, MetricsError> {
        self.correct = match self.status {
            TraceStatus::Complete => Some(is_correct(&self.final_answer_raw, sample, scheme)?),
            TraceStatus::Aborted => None,
        };
        Ok(self.correct)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasonerConfig {
    /// Word limit injected for samples without options.
    pub answer_word_limit: usize,
    /// Ask for a ranked candidate list of this length on the answer line.
    pub top_k: Option<usize>,
}

impl Default for ReasonerConfig {
    fn default() -> Self {
        Self {
            answer_word_limit: 3,
            top_k: None,
        }
    }
}

fn answer_instruction(sample: &Sample, cfg: &ReasonerConfig) -> String {
    let mut out = String::new();
    if let Some(choices) = &sample.choices {
        out.push_str("Options:\n");
        for (i, c) in choices.iter().enumerate() {
            out.push_str(&format!("({}) {c}\n", (b'A' + i as u8) as char));
        }
        out.push_str("Choose exactly one option and copy its text verbatim as the answer.");
    } else {
        out.push_str(&format!("Answer in at most {} words.", cfg.answer_word_limit));
    }
    if let Some(k) = cfg.top_k {
        out.push_str(&format!(
            " On the answer line, list up to {k} candidate answers separated by semicolons, most likely first."
        ));
    }
    out
}

/// Returns the text after the last `ANSWER:` marker line, if any.
pub fn parse_answer(reply: &str) -> Option<(String, usize)> {
    let lines: Vec<&str> = reply.lines().collect();
    lines.iter().enumerate().rev().find_map(|(i, line)| {
        let t = line.trim().trim_start_matches(['*', '#', '-', ' ']);
        let head = t.get(..MARKER.len())?;
        head.eq_ignore_ascii_case(MARKER).then(|| {
            let ans = t[MARKER.len()..].trim().trim_matches('*').trim();
            (ans.to_string(), i)
        })
    })
}

fn numbered_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?:^|\s)(\d+[.)]\s)").expect("valid pattern"))
}

/// Splits reasoning text into one step per line. Inline numbered steps
/// (`1. ... 2. ...`) are broken onto separate lines.
pub fn rationale_lines(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let starts: Vec<usize> = numbered_re()
            .captures_iter(line)
            .map(|c| c.get(1).expect("group").start())
            .collect();
        if starts.len() < 2 {
            out.push(line.to_string());
            continue;
        }
        if starts[0] > 0 {
            out.push(line[..starts[0]].trim().to_string());
        }
        for (i, s) in starts.iter().enumerate() {
            let end = starts.get(i + 1).copied().unwrap_or(line.len());
            out.push(line[*s..end].trim().to_string());
        }
    }
    out
}

fn strip_number(line: &str) -> &str {
    let t = line.trim();
    match t.split_once(['.', ')']) {
        Some((n, rest)) if !n.is_empty() && n.chars().all(|c| c.is_ascii_digit()) => rest.trim(),
        _ => t,
    }
}

fn complete(backend: &dyn ChatBackend, turns: &mut [ChatTurn], route: &Route, system: &str) -> Result<String, BackendError> {
    turns[0] = ChatTurn::system(route.header(system));
    backend.complete(turns)
}

/// Asks again for the marker line. `Ok(None)` means the retry also failed to
/// produce one (or was not scripted).
fn reformat(
    backend: &dyn ChatBackend,
    turns: &mut Vec<ChatTurn>,
    route: &Route,
    system: &str,
    reply: &str,
) -> Result<Option<String>, BackendError> {
    turns.push(ChatTurn::assistant(if reply.trim().is_empty() { "(empty)" } else { reply }));
    turns.push(ChatTurn::user(
        "Restate only your final answer on a single line beginning with `ANSWER:`.",
        None,
    ));
    match complete(backend, turns, route, system) {
        Ok(r) => Ok(parse_answer(&r).map(|(a, _)| a)),
        Err(BackendError::ScriptMiss { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

const DIRECT_SYSTEM: &str = "You answer questions about images.";

/// Single-exchange reasoning: a short numbered rationale and a marked answer.
pub fn reason_direct(
    sample: &Sample,
    backend: &dyn ChatBackend,
    cfg: &ReasonerConfig,
) -> Result<ReasoningTrace, ReasonerError> {
    let prompt = format!(
        "Question: {}\n{}\nFirst write a brief numbered reasoning path, one short step per line. \
         Then give the final answer on its own line starting with `ANSWER:`.",
        sample.question,
        answer_instruction(sample, cfg)
    );
    let route = Route::new(&sample.sample_id, "direct");
    let mut turns = vec![
        ChatTurn::system(String::new()),
        ChatTurn::user(prompt, Some(sample.image_ref.clone())),
    ];
    let reply = complete(backend, &mut turns, &route, DIRECT_SYSTEM)?;
    let mut trace = ReasoningTrace {
        sample_id: sample.sample_id.clone(),
        mode: ReasoningMode::Direct,
        question_type: None,
        template_version: None,
        steps: Vec::new(),
        rationale_raw: String::new(),
        final_answer_raw: String::new(),
        final_answer_norm: String::new(),
        path_signature: Vec::new(),
        correct: None,
        status: TraceStatus::Complete,
    };
    let (answer, body) = match parse_answer(&reply) {
        Some((a, idx)) => (Some(a), reply.lines().take(idx).collect::<Vec<_>>().join("\n")),
        None => (None, reply.clone()),
    };
    let mut lines = rationale_lines(&body);
    if lines.is_empty() {
        lines.push(reply.trim().to_string());
    }
    trace.rationale_raw = lines.join("\n");
    let answer = match answer {
        Some(a) => a,
        None => {
            let retry = Route::new(&sample.sample_id, "direct:reformat");
            match reformat(backend, &mut turns, &retry, DIRECT_SYSTEM, &reply)? {
                Some(a) => a,
                None => {
                    return Err(ReasonerError::UnparseableAnswer {
                        sample_id: sample.sample_id.clone(),
                        stage: retry.stage,
                        partial: Box::new(trace),
                    })
                }
            }
        }
    };
    trace.set_answer(&answer);
    Ok(trace)
}

/// Multi-turn reasoning along a template chain: one exchange per
/// sub-question, then the original question.
pub fn reason_multistep(
    sample: &Sample,
    qt: &TypeId,
    template: &CotTemplate,
    bank: &SubQuestionBank,
    backend: &dyn ChatBackend,
    cfg: &ReasonerConfig,
) -> Result<ReasoningTrace, ReasonerError> {
    if template.question_type != *qt {
        return Err(ReasonerError::TemplateMismatch {
            requested: qt.clone(),
            template: template.question_type.clone(),
        });
    }
    let texts = template
        .chain
        .iter()
        .map(|id| bank.text(id).ok_or_else(|| ReasonerError::UnknownSubQuestion(id.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    let system = format!(
        "You answer questions about an image through a sequence of short sub-questions. \
         Answer each sub-question briefly. The question to be answered at the end is: {}",
        sample.question
    );
    let mut trace = ReasoningTrace {
        sample_id: sample.sample_id.clone(),
        mode: ReasoningMode::Multistep,
        question_type: Some(qt.clone()),
        template_version: Some(template.version),
        steps: Vec::new(),
        rationale_raw: String::new(),
        final_answer_raw: String::new(),
        final_answer_norm: String::new(),
        path_signature: template.chain.clone(),
        correct: None,
        status: TraceStatus::Complete,
    };
    let mut turns = vec![ChatTurn::system(String::new())];
    for (i, (id, text)) in template.chain.iter().zip(&texts).enumerate() {
        let image = (i == 0).then(|| sample.image_ref.clone());
        turns.push(ChatTurn::user(*text, image));
        let route = Route::new(&sample.sample_id, format!("sq:{id}"));
        match complete(backend, &mut turns, &route, &system) {
            Ok(answer) => {
                turns.push(ChatTurn::assistant(answer.clone()));
                trace.steps.push(ReasoningStep {
                    label: id.to_string(),
                    question: text.to_string(),
                    answer,
                });
            }
            Err(e) => {
                log::warn!("multi-step run for {} aborted at {id}: {e}", sample.sample_id);
                trace.status = TraceStatus::Aborted;
                return Ok(trace);
            }
        }
    }
    let tag = chain_tag(&template.chain);
    turns.push(ChatTurn::user(
        format!(
            "Using the context established above, answer the question: {}\n{}\n\
             Give the final answer on its own line starting with `ANSWER:`.",
            sample.question,
            answer_instruction(sample, cfg)
        ),
        None,
    ));
    let route = Route::new(&sample.sample_id, format!("final@{tag}"));
    let reply = match complete(backend, &mut turns, &route, &system) {
        Ok(r) => r,
        Err(e) => {
            log::warn!("multi-step run for {} aborted at final: {e}", sample.sample_id);
            trace.status = TraceStatus::Aborted;
            return Ok(trace);
        }
    };
    let answer = match parse_answer(&reply) {
        Some((a, _)) => a,
        None => {
            let retry = Route::new(&sample.sample_id, format!("final:reformat@{tag}"));
            match reformat(backend, &mut turns, &retry, &system, &reply) {
                Ok(Some(a)) => a,
                Ok(None) => {
                    return Err(ReasonerError::UnparseableAnswer {
                        sample_id: sample.sample_id.clone(),
                        stage: retry.stage,
                        partial: Box::new(trace),
                    })
                }
                Err(e) => {
                    log::warn!("multi-step run for {} aborted at reformat: {e}", sample.sample_id);
                    trace.status = TraceStatus::Aborted;
                    return Ok(trace);
                }
            }
        }
    };
    trace.set_answer(&answer);
    Ok(trace)
}

/// Keyword rules for rule-mode path extraction, checked in this order.
const PATH_RULES: &[(&str, &str)] = &[
    ("tid", r"\b(time|clock|season|hour|o'?clock|\d{1,2}\s?(am|pm)|day|daytime|night|morning|afternoon|evening|noon|winter|summer|autumn|spring|month|year|calendar|date|sunset|sunrise)\b"),
    ("sid", r"\b(country|countries|city|town|region|continent|nation|street sign|landmark|flag|geograph\w*|where this is)\b"),
    ("ev", r"\b(exists?|present|visible|there (is|are)|can be seen|i see|contains?|no sign of)\b"),
    ("srd", r"\b(left|right|behind|above|below|next to|in front of|on top of|beside|between|under|underneath|near)\b"),
    ("ol", r"\b(located|location|corner|center|centre|middle|background|foreground|position)\b"),
    ("rd", r"\b(relationship|related|together|interact\w*|holding|belongs?|with each other)\b"),
    ("kr", r"\b(know|knowledge|usually|typically|commonly|generally|often|means?|indicates?|suggests?|known|because)\b"),
    ("cd", r"\b(colou?r|red|orange|yellow|green|blue|purple|pink|brown|black|white|gr[ae]y|shape|size|large|small|big|tall|wearing|made of|texture|pattern|wooden|metal)\b"),
    ("sd", r"\b(scene|setting|outdoors?|indoors?|outside|inside|environment|room|kitchen|park|beach|field)\b"),
    ("od", r"\b(objects?|focus|count|number of|one|two|three|several|person|people|man|woman|animal)\b"),
];

fn path_rules() -> &'static [(SqId, Regex)] {
    static CELL: OnceLock<Vec<(SqId, Regex)>> = OnceLock::new();
    CELL.get_or_init(|| {
        PATH_RULES
            .iter()
            .map(|(id, p)| (SqId::from(*id), Regex::new(&format!("(?i){p}")).expect("valid rule")))
            .collect()
    })
}

/// Maps one rationale line onto the bank by keyword; `other` when nothing matches.
pub fn label_line_rule(line: &str, bank: &SubQuestionBank) -> SqId {
    let text = strip_number(line);
    path_rules()
        .iter()
        .filter(|(id, _)| bank.contains(id))
        .find(|(_, re)| re.is_match(text))
        .map(|(id, _)| id.clone())
        .unwrap_or_else(|| SqId::from(OTHER))
}

/// How rationale lines are labeled.
#[derive(Clone, Copy)]
pub enum PathExtractor<'a> {
    Rule,
    Backend(&'a dyn ChatBackend),
}

fn collapse(labels: Vec<SqId>) -> Vec<SqId> {
    let mut out: Vec<SqId> = Vec::with_capacity(labels.len());
    for l in labels {
        if out.last() != Some(&l) {
            out.push(l);
        }
    }
    out
}

fn label_with_backend(
    sample_id: &str,
    lines: &[String],
    bank: &SubQuestionBank,
    backend: &dyn ChatBackend,
) -> Option<Vec<SqId>> {
    let mut prompt = String::from(
        "Label each reasoning step with the id of the sub-question it answers, \
         or `other` if none fits.\n\nSub-questions:\n",
    );
    for e in bank.entries() {
        prompt.push_str(&format!("- {}: {}\n", e.id, e.text));
    }
    prompt.push_str("\nSteps:\n");
    for (i, l) in lines.iter().enumerate() {
        prompt.push_str(&format!("{}. {}\n", i + 1, strip_number(l)));
    }
    prompt.push_str("\nReply with one id per step, in order, separated by commas.");
    let turns = [
        ChatTurn::system(Route::new(sample_id, "extract").header("You label reasoning steps.")),
        ChatTurn::user(prompt, None),
    ];
    let reply = backend
        .complete(&turns)
        .map_err(|e| log::debug!("path extraction for {sample_id} fell back to rules: {e}"))
        .ok()?;
    let labels: Vec<SqId> = reply
        .split([',', '\n', '>'])
        .map(|t| strip_number(t).trim().trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|t| !t.is_empty())
        .map(|t| {
            if t.eq_ignore_ascii_case(OTHER) {
                Some(SqId::from(OTHER))
            } else {
                bank.resolve(t).cloned()
            }
        })
        .collect::<Option<_>>()?;
    (labels.len() == lines.len()).then_some(labels)
}

/// Projects a direct trace's rationale onto sub-question ids.
pub fn extract_path(trace: &ReasoningTrace, bank: &SubQuestionBank, extractor: PathExtractor<'_>) -> Vec<SqId> {
    let mut lines = rationale_lines(&trace.rationale_raw);
    if lines.is_empty() {
        lines.push(String::new());
    }
    let labels = match extractor {
        PathExtractor::Backend(b) => label_with_backend(&trace.sample_id, &lines, bank, b),
        PathExtractor::Rule => None,
    }
    .unwrap_or_else(|| lines.iter().map(|l| label_line_rule(l, bank)).collect());
    collapse(labels)
}

/// Sequence equality, or label-set Jaccard similarity of at least `tau`
/// when `tau < 1`.
pub fn path_equal(p1: &[SqId], p2: &[SqId], tau: f64) -> bool {
    if p1 == p2 {
        return true;
    }
    if tau >= 1.0 {
        return false;
    }
    let a: BTreeSet<&SqId> = p1.iter().collect();
    let b: BTreeSet<&SqId> = p2.iter().collect();
    let union = a.union(&b).count();
    let inter = a.intersection(&b).count();
    union == 0 || inter as f64 / union as f64 >= tau
}

/// Thread pool with at most `n` workers (at least one).
pub fn bounded_pool(n: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n.max(1))
        .build()
        .expect("thread pool builds")
}

/// Direct reasoning over many samples, in input order. Backend failures give
/// aborted traces; unanswerable replies give completed traces with an empty
/// answer. Completed traces carry their extracted path.
pub fn run_direct(
    samples: &[&Sample],
    bank: &SubQuestionBank,
    backend: &dyn ChatBackend,
    cfg: &ReasonerConfig,
    extractor: PathExtractor<'_>,
    parallelism: usize,
) -> Vec<ReasoningTrace> {
    bounded_pool(parallelism).install(|| {
        samples
            .par_iter()
            .map(|s| {
                let mut t = match reason_direct(s, backend, cfg) {
                    Ok(t) => t,
                    Err(ReasonerError::UnparseableAnswer { partial, .. }) => *partial,
                    Err(e) => {
                        log::warn!("direct run for {} aborted: {e}", s.sample_id);
                        let mut t = ReasoningTrace::direct_stub(&s.sample_id, "");
                        t.rationale_raw.clear();
                        t.status = TraceStatus::Aborted;
                        return t;
                    }
                };
                t.path_signature = extract_path(&t, bank, extractor);
                t
            })
            .collect()
    })
}

/// Multi-step reasoning over many samples with each sample's active template
/// (the seed template when its type has none yet).
#[allow(clippy::too_many_arguments)]
pub fn run_multistep(
    samples: &[&Sample],
    types: &BTreeMap<String, TypeId>,
    registry: &TemplateRegistry,
    bank: &SubQuestionBank,
    taxonomy: &Taxonomy,
    backend: &dyn ChatBackend,
    cfg: &ReasonerConfig,
    parallelism: usize,
) -> Result<Vec<ReasoningTrace>, ReasonerError> {
    bounded_pool(parallelism).install(|| {
        samples
            .par_iter()
            .map(|s| {
                let qt = types
                    .get(&s.sample_id)
                    .ok_or_else(|| ReasonerError::MissingAssignment(s.sample_id.clone()))?;
                let template = match registry.active(qt) {
                    Some(t) => t,
                    None => seed_template(qt, taxonomy).map_err(|_| ReasonerError::NoTemplate(qt.clone()))?,
                };
                match reason_multistep(s, qt, &template, bank, backend, cfg) {
                    Err(ReasonerError::UnparseableAnswer { partial, .. }) => Ok(*partial),
                    other => other,
                }
            })
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ScriptedBackend;
    use crate::corpus::Dataset;
    use crate::cot::Provenance;
    use crate::taxonomy::sq_chain;
    use proptest::prelude::*;

    fn sample(choices: bool) -> Sample {
        Sample {
            sample_id: "s1".into(),
            dataset: if choices { Dataset::Aokvqa } else { Dataset::Okvqa },
            image_ref: "img/s1.jpg".into(),
            question: "What season is it?".into(),
            choices: choices.then(|| vec!["summer".into(), "fall".into()]),
            gold_answers: vec!["fall".into()],
            gold_choice_index: choices.then_some(1),
            scripted_truth: None,
        }
    }

    fn tpl(qt: &str, chain: &[&str]) -> CotTemplate {
        CotTemplate {
            question_type: qt.into(),
            chain: sq_chain(chain),
            version: 1,
            parent_version: None,
            provenance: Provenance::Seed,
        }
    }

    /// Records the prompts it receives while delegating to a script.
    struct Spy(ScriptedBackend, std::sync::Mutex<Vec<Vec<ChatTurn>>>);

    impl ChatBackend for Spy {
        fn complete(&self, turns: &[ChatTurn]) -> Result<String, BackendError> {
            self.1.lock().unwrap().push(turns.to_vec());
            self.0.complete(turns)
        }
        fn model_name(&self) -> &str {
            "spy"
        }
    }

    fn spy(entries: &[(&str, &str)]) -> Spy {
        Spy(
            ScriptedBackend::from_entries(entries.iter().map(|(k, r)| ("s1", *k, *r))).unwrap(),
            Default::default(),
        )
    }

    #[test]
    fn direct_parses_marker_and_rationale() {
        let b = spy(&[("direct", "1. Leaves are orange. 2. Orange leaves mean autumn.\nANSWER: fall")]);
        let t = reason_direct(&sample(false), &b, &ReasonerConfig::default()).unwrap();
        assert_eq!(t.final_answer_raw, "fall");
        assert_eq!(t.final_answer_norm, "fall");
        assert_eq!(t.rationale_raw, "1. Leaves are orange.\n2. Orange leaves mean autumn.");
        assert!(t.steps.is_empty());
        let sent = &b.1.lock().unwrap()[0];
        assert!(sent[1].content.contains("at most 3 words"));
        assert_eq!(sent[1].image_ref.as_deref(), Some("img/s1.jpg"));
    }

    #[test]
    fn direct_reformat_retry() {
        let b = spy(&[("direct", "It is fall."), ("direct:reformat", "ANSWER: fall")]);
        let t = reason_direct(&sample(false), &b, &ReasonerConfig::default()).unwrap();
        assert_eq!((t.final_answer_raw.as_str(), t.rationale_raw.as_str()), ("fall", "It is fall."));

        let b = spy(&[("direct", "It is fall."), ("direct:reformat", "fall, I think")]);
        let err = reason_direct(&sample(false), &b, &ReasonerConfig::default()).unwrap_err();
        assert!(matches!(err, ReasonerError::UnparseableAnswer { .. }));
        assert_eq!(b.1.lock().unwrap().len(), 2);
    }

    #[test]
    fn direct_enumerates_choices() {
        let b = spy(&[("direct", "1. Orange leaves.\nANSWER: fall")]);
        reason_direct(&sample(true), &b, &ReasonerConfig::default()).unwrap();
        let prompt = b.1.lock().unwrap()[0][1].content.clone();
        assert!(prompt.contains("(A) summer") && prompt.contains("(B) fall"));
        assert!(prompt.contains("verbatim"));
        assert!(!prompt.contains("words"));
    }

    #[test]
    fn multistep_runs_chain_then_final() {
        let b = spy(&[
            ("sq:tid", "No clock, but the trees are orange."),
            ("sq:sd", "A park with fallen leaves."),
            ("final", "ANSWER: fall"),
        ]);
        let t = reason_multistep(
            &sample(false),
            &"TR".into(),
            &tpl("TR", &["tid", "sd"]),
            &SubQuestionBank::builtin(),
            &b,
            &ReasonerConfig::default(),
        )
        .unwrap();
        let calls = b.1.lock().unwrap();
        assert_eq!(calls.len(), 3);
        assert_eq!(Route::from_turns(&calls[2]).unwrap().stage, "final@tid>sd");
        assert!(calls[0][0].content.contains("What season is it?"));
        assert_eq!(calls[2].len(), 6);
        assert_eq!(t.path_signature, sq_chain(&["tid", "sd"]));
        assert_eq!(t.steps.iter().map(|s| s.label.as_str()).collect::<Vec<_>>(), ["tid", "sd"]);
        assert_eq!(t.final_answer_raw, "fall");
        assert_eq!(t.status, TraceStatus::Complete);
    }

    #[test]
    fn ev_answer_stays_in_context() {
        let b = spy(&[("sq:od", "One: a dog."), ("sq:ev", "no"), ("sq:ol", "Nowhere."), ("final", "ANSWER: none")]);
        let t = reason_multistep(
            &sample(false),
            &"OLR".into(),
            &tpl("OLR", &["od", "ev", "ol"]),
            &SubQuestionBank::builtin(),
            &b,
            &ReasonerConfig::default(),
        )
        .unwrap();
        assert_eq!(t.steps.len(), 3);
        let calls = b.1.lock().unwrap();
        let last = calls.last().unwrap();
        assert!(last.iter().any(|turn| turn.content == "no"));
    }

    #[test]
    fn backend_failure_aborts_with_partial_trace() {
        let b = spy(&[("sq:tid", "a clock")]);
        let mut t = reason_multistep(
            &sample(false),
            &"TR".into(),
            &tpl("TR", &["tid", "sd"]),
            &SubQuestionBank::builtin(),
            &b,
            &ReasonerConfig::default(),
        )
        .unwrap();
        assert_eq!(t.status, TraceStatus::Aborted);
        assert_eq!(t.steps.len(), 1);
        assert_eq!(t.score(&sample(false), MatchScheme::ExactNorm).unwrap(), None);
    }

    #[test]
    fn rule_extraction_examples() {
        let bank = SubQuestionBank::builtin();
        let mut t = ReasoningTrace::direct_stub("s1", "x");
        t.rationale_raw = "1. The leaves are orange".into();
        assert_eq!(extract_path(&t, &bank, PathExtractor::Rule), sq_chain(&["cd"]));
        t.rationale_raw = "1. There is a clock on the wall. 2. Clock shows 3pm.".into();
        assert_eq!(extract_path(&t, &bank, PathExtractor::Rule), sq_chain(&["tid"]));
        t.rationale_raw = "it just is".into();
        assert_eq!(extract_path(&t, &bank, PathExtractor::Rule), sq_chain(&[OTHER]));
    }

    #[test]
    fn backend_extraction_with_fallback() {
        let bank = SubQuestionBank::builtin();
        let mut t = ReasoningTrace::direct_stub("s1", "x");
        t.rationale_raw = "1. foo\n2. bar".into();
        let b = ScriptedBackend::from_entries([("s1", "extract", "tid, sd")]).unwrap();
        assert_eq!(extract_path(&t, &bank, PathExtractor::Backend(&b)), sq_chain(&["tid", "sd"]));
        let b = ScriptedBackend::from_entries([("s1", "extract", "tid")]).unwrap();
        assert_eq!(extract_path(&t, &bank, PathExtractor::Backend(&b)), sq_chain(&[OTHER]));
    }

    #[test]
    fn path_equal_examples() {
        let a = sq_chain(&["tid", "sd"]);
        let b = sq_chain(&["sd", "tid"]);
        assert!(path_equal(&a, &a, 1.0));
        assert!(!path_equal(&a, &b, 1.0));
        assert!(path_equal(&a, &b, 0.8));
        assert!(path_equal(&[], &[], 1.0));
        assert!(!path_equal(&a, &sq_chain(&["tid", "kr"]), 0.8));
    }

    fn path() -> impl Strategy<Value = Vec<SqId>> {
        proptest::collection::vec(proptest::sample::select(vec!["od", "ev", "cd", "tid", "kr"]), 0..5)
            .prop_map(|v| sq_chain(&v))
    }

    proptest! {
        #[test]
        fn path_equal_reflexive_symmetric(a in path(), b in path(), tau in 0.0f64..=1.0) {
            prop_assert!(path_equal(&a, &a, tau));
            prop_assert_eq!(path_equal(&a, &b, tau), path_equal(&b, &a, tau));
        }

        #[test]
        fn exact_mode_transitive(a in path(), b in path(), c in path()) {
            if path_equal(&a, &b, 1.0) && path_equal(&b, &c, 1.0) {
                prop_assert!(path_equal(&a, &c, 1.0));
            }
        }

        #[test]
        fn extraction_is_total_and_collapsed(text in "[a-z0-9 .\n]{0,80}") {
            let mut t = ReasoningTrace::direct_stub("s", "x");
            t.rationale_raw = text;
            let p = extract_path(&t, &SubQuestionBank::builtin(), PathExtractor::Rule);
            prop_assert!(!p.is_empty());
            prop_assert!(p.windows(2).all(|w| w[0] != w[1]));
        }
    }
}
