//! Dataset ingestion into a unified sample model.
//!
//! Three public VQA record layouts are supported (A-OKVQA, OK-VQA, FVQA) plus
//! the harness's own line-delimited synthetic format. Every loader produces a
//! [`Corpus`] whose samples have already passed [`Sample::validate`]; the
//! normalized line format written by [`write_normalized`] reloads field for
//! field.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: corpus contains no records")]
    EmptyCorpus { path: PathBuf },
    #[error("record {index}: missing or invalid field `{field}`")]
    MissingField { index: usize, field: &'static str },
    #[error("record {index}: missing image reference")]
    MissingImageRef { index: usize },
    #[error("sample {sample_id}: choice index {choice_index} out of range for {n_choices} choices")]
    InvalidChoiceIndex {
        sample_id: String,
        choice_index: usize,
        n_choices: usize,
    },
    #[error("sample {sample_id}: choices present but no gold choice index")]
    MissingChoiceIndex { sample_id: String },
    #[error("sample {sample_id}: gold choice index given without choices")]
    ChoiceIndexWithoutChoices { sample_id: String },
    #[error("sample {sample_id}: dataset {dataset} does not provide answer options")]
    ChoicesNotAllowed { sample_id: String, dataset: Dataset },
    #[error("sample {sample_id}: no gold answers")]
    NoGoldAnswers { sample_id: String },
    #[error("sample {sample_id}: empty gold answer at position {position}")]
    EmptyGoldAnswer { sample_id: String, position: usize },
    #[error("sample {sample_id}: empty question")]
    EmptyQuestion { sample_id: String },
    #[error("question {question_id} has no matching record in the other file")]
    UnmatchedQuestion { question_id: String },
    #[error("duplicate sample id {sample_id}")]
    DuplicateSampleId { sample_id: String },
    #[error("{path}: line {line}: schema violation at `{field_path}`: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        field_path: String,
        message: String,
    },
    #[error("{path}: line {line}: mixed {what} within one corpus")]
    Inconsistent {
        path: PathBuf,
        line: usize,
        what: &'static str,
    },
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Dataset {
    Aokvqa,
    Okvqa,
    Fvqa,
    Synthetic,
}

impl Dataset {
    pub fn provides_choices(self) -> bool {
        matches!(self, Dataset::Aokvqa | Dataset::Synthetic)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dataset::Aokvqa => "AOKVQA",
            Dataset::Okvqa => "OKVQA",
            Dataset::Fvqa => "FVQA",
            Dataset::Synthetic => "SYNTHETIC",
        }
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Dataset {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "aokvqa" => Ok(Dataset::Aokvqa),
            "okvqa" => Ok(Dataset::Okvqa),
            "fvqa" => Ok(Dataset::Fvqa),
            "synthetic" => Ok(Dataset::Synthetic),
            other => Err(format!("unknown dataset `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "TRAIN",
            Split::Val => "VAL",
            Split::Test => "TEST",
        }
    }

    fn coco_folder(self) -> &'static str {
        match self {
            Split::Train => "train2017",
            Split::Val => "val2017",
            Split::Test => "test2017",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// Ground-truth labels attached to synthetic samples. Only tests read them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedTruth {
    pub direct_correct: bool,
    pub multistep_correct: bool,
    pub injected_fp: bool,
}

/// One VQA item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub sample_id: String,
    pub dataset: Dataset,
    pub image_ref: String,
    pub question: String,
    pub choices: Option<Vec<String>>,
    pub gold_answers: Vec<String>,
    pub gold_choice_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scripted_truth: Option<ScriptedTruth>,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        let id = || self.sample_id.clone();
        if self.question.trim().is_empty() {
            return Err(CorpusError::EmptyQuestion { sample_id: id() });
        }
        match (&self.choices, self.gold_choice_index) {
            (Some(_), _) if !self.dataset.provides_choices() => {
                return Err(CorpusError::ChoicesNotAllowed {
                    sample_id: id(),
                    dataset: self.dataset,
                })
            }
            (Some(choices), Some(idx)) if idx >= choices.len() => {
                return Err(CorpusError::InvalidChoiceIndex {
                    sample_id: id(),
                    choice_index: idx,
                    n_choices: choices.len(),
                })
            }
            (Some(_), None) => return Err(CorpusError::MissingChoiceIndex { sample_id: id() }),
            (None, Some(_)) => return Err(CorpusError::ChoiceIndexWithoutChoices { sample_id: id() }),
            _ => {}
        }
        if self.gold_answers.is_empty() {
            return Err(CorpusError::NoGoldAnswers { sample_id: id() });
        }
        if let Some(position) = self.gold_answers.iter().position(|a| a.trim().is_empty()) {
            return Err(CorpusError::EmptyGoldAnswer {
                sample_id: id(),
                position,
            });
        }
        Ok(())
    }

    /// Text of the gold choice, when the sample is multiple choice.
    pub fn gold_choice(&self) -> Option<&str> {
        let idx = self.gold_choice_index?;
        self.choices.as_ref()?.get(idx).map(String::as_str)
    }
}

/// Ordered, validated samples from one dataset split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub dataset: Dataset,
    pub split: Split,
    samples: Vec<Sample>,
}

impl Corpus {
    /// Validates every sample and rejects duplicate ids.
    pub fn new(dataset: Dataset, split: Split, samples: Vec<Sample>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(samples.len());
        for s in &samples {
            s.validate()?;
            if !seen.insert(s.sample_id.as_str()) {
                return Err(CorpusError::DuplicateSampleId {
                    sample_id: s.sample_id.clone(),
                });
            }
        }
        Ok(Self {
            dataset,
            split,
            samples,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, sample_id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.sample_id == sample_id)
    }

    /// Map from sample id to sample, for repeated lookups.
    pub fn index(&self) -> BTreeMap<&str, &Sample> {
        self.samples.iter().map(|s| (s.sample_id.as_str(), s)).collect()
    }
}

/// Result of ingesting a dataset file.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub corpus: Corpus,
    /// Record fields not recognised by the loader, by name.
    pub unknown_fields: BTreeMap<String, usize>,
}

impl Ingested {
    pub fn unknown_field_count(&self) -> usize {
        self.unknown_fields.values().sum()
    }

    fn finish(corpus: Corpus, unknown_fields: BTreeMap<String, usize>) -> Self {
        let n: usize = unknown_fields.values().sum();
        if n > 0 {
            log::warn!(
                "{} corpus: ignored {n} unknown field occurrence(s): {:?}",
                corpus.dataset,
                unknown_fields.keys().collect::<Vec<_>>()
            );
        }
        Self {
            corpus,
            unknown_fields,
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_json(path: &Path) -> Result<Option<Value>> {
    let text = read_text(path)?;
    if text.trim().is_empty() {
        return Ok(None);
    }
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|source| CorpusError::Json {
            path: path.to_path_buf(),
            source,
        })
}

fn count_unknown(obj: &Map<String, Value>, known: &[&str], acc: &mut BTreeMap<String, usize>) {
    for key in obj.keys() {
        if !known.contains(&key.as_str()) {
            *acc.entry(key.clone()).or_default() += 1;
        }
    }
}

/// Renders string or integer ids uniformly.
fn id_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) if !s.trim().is_empty() => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn string_list(v: &Value) -> Option<Vec<String>> {
    v.as_array()?
        .iter()
        .map(|x| x.as_str().map(str::to_string))
        .collect()
}

fn field<'a>(obj: &'a Map<String, Value>, index: usize, name: &'static str) -> Result<&'a Value> {
    obj.get(name)
        .filter(|v| !v.is_null())
        .ok_or(CorpusError::MissingField { index, field: name })
}

fn records(value: Value, wrapper: &str, path: &Path) -> Result<Vec<Value>> {
    let arr = match value {
        Value::Array(a) => a,
        Value::Object(mut o) => match o.remove(wrapper) {
            Some(Value::Array(a)) => a,
            _ => {
                return Err(CorpusError::MissingField {
                    index: 0,
                    field: leak_field(wrapper),
                })
            }
        },
        _ => {
            return Err(CorpusError::Schema {
                path: path.to_path_buf(),
                line: 1,
                field_path: ".".into(),
                message: "expected a record array".into(),
            })
        }
    };
    if arr.is_empty() {
        return Err(CorpusError::EmptyCorpus {
            path: path.to_path_buf(),
        });
    }
    Ok(arr)
}

fn leak_field(name: &str) -> &'static str {
    match name {
        "questions" => "questions",
        "annotations" => "annotations",
        _ => "records",
    }
}

fn as_object(v: &Value, index: usize) -> Result<&Map<String, Value>> {
    v.as_object().ok_or(CorpusError::MissingField {
        index,
        field: "record",
    })
}

/// Case-insensitive, order-preserving de-duplication (first spelling wins).
fn dedup_case_insensitive(items: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut seen = HashSet::new();
    items
        .into_iter()
        .map(|s| s.trim().to_string())
        .filter(|s| seen.insert(s.to_lowercase()))
        .collect()
}

fn dedup_exact(items: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut seen = HashSet::new();
    items
        .into_iter()
        .map(|s| s.trim().to_string())
        .filter(|s| seen.insert(s.clone()))
        .collect()
}

const AOKVQA_FIELDS: &[&str] = &[
    "split",
    "image_id",
    "question_id",
    "question",
    "choices",
    "correct_choice_idx",
    "direct_answers",
    "difficult_direct_answer",
    "rationales",
];

/// Loads an A-OKVQA annotation file (a JSON array of question records).
///
/// Gold answers are the direct answers followed by the correct choice text,
/// de-duplicated case-insensitively.
pub fn load_aokvqa(path: impl AsRef<Path>, split: Split) -> Result<Ingested> {
    let path = path.as_ref();
    let value = read_json(path)?.ok_or_else(|| CorpusError::EmptyCorpus {
        path: path.to_path_buf(),
    })?;
    let mut unknown = BTreeMap::new();
    let mut samples = Vec::new();
    for (index, rec) in records(value, "questions", path)?.iter().enumerate() {
        let obj = as_object(rec, index)?;
        count_unknown(obj, AOKVQA_FIELDS, &mut unknown);
        let sample_id = id_string(field(obj, index, "question_id")?).ok_or(CorpusError::MissingField {
            index,
            field: "question_id",
        })?;
        let image_ref = match obj.get("image_id") {
            Some(Value::Number(n)) => match n.as_u64() {
                Some(id) => format!("{}/{id:012}.jpg", split.coco_folder()),
                None => return Err(CorpusError::MissingImageRef { index }),
            },
            Some(Value::String(s)) if !s.trim().is_empty() => s.clone(),
            _ => return Err(CorpusError::MissingImageRef { index }),
        };
        let question = field(obj, index, "question")?
            .as_str()
            .ok_or(CorpusError::MissingField {
                index,
                field: "question",
            })?
            .to_string();
        let choices = string_list(field(obj, index, "choices")?).ok_or(CorpusError::MissingField {
            index,
            field: "choices",
        })?;
        let gold_idx = field(obj, index, "correct_choice_idx")?
            .as_u64()
            .ok_or(CorpusError::MissingField {
                index,
                field: "correct_choice_idx",
            })? as usize;
        if gold_idx >= choices.len() {
            return Err(CorpusError::InvalidChoiceIndex {
                sample_id,
                choice_index: gold_idx,
                n_choices: choices.len(),
            });
        }
        let direct = match obj.get("direct_answers") {
            None | Some(Value::Null) => Vec::new(),
            Some(v) => string_list(v).ok_or(CorpusError::MissingField {
                index,
                field: "direct_answers",
            })?,
        };
        let gold_answers = dedup_case_insensitive(
            direct
                .into_iter()
                .chain(std::iter::once(choices[gold_idx].clone()))
                .filter(|s| !s.trim().is_empty()),
        );
        samples.push(Sample {
            sample_id,
            dataset: Dataset::Aokvqa,
            image_ref,
            question,
            choices: Some(choices),
            gold_answers,
            gold_choice_index: Some(gold_idx),
            scripted_truth: None,
        });
    }
    Ok(Ingested::finish(Corpus::new(Dataset::Aokvqa, split, samples)?, unknown))
}

const OKVQA_QUESTION_FIELDS: &[&str] = &["image_id", "question", "question_id"];
const OKVQA_ANNOTATION_FIELDS: &[&str] = &[
    "image_id",
    "question_id",
    "answers",
    "question_type",
    "answer_type",
    "confidence",
];

/// Loads OK-VQA from its question and annotation files (VQA v2 layout).
///
/// Both `{"questions": [...]}` wrappers and bare arrays are accepted; answers
/// may be plain strings or `{"answer": ...}` objects. The corpus is tagged as
/// the test split (OK-VQA's public evaluation split).
pub fn load_okvqa(questions_path: impl AsRef<Path>, annotations_path: impl AsRef<Path>) -> Result<Ingested> {
    let qpath = questions_path.as_ref();
    let apath = annotations_path.as_ref();
    let empty = |p: &Path| CorpusError::EmptyCorpus { path: p.to_path_buf() };
    let questions = records(read_json(qpath)?.ok_or_else(|| empty(qpath))?, "questions", qpath)?;
    let annotations = read_json(apath)?.ok_or_else(|| empty(apath))?;
    let annotations = match annotations {
        Value::Array(a) => a,
        other => records(other, "annotations", apath)?,
    };
    let mut unknown = BTreeMap::new();

    let mut answers_by_id: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (index, rec) in annotations.iter().enumerate() {
        let obj = as_object(rec, index)?;
        count_unknown(obj, OKVQA_ANNOTATION_FIELDS, &mut unknown);
        let qid = id_string(field(obj, index, "question_id")?).ok_or(CorpusError::MissingField {
            index,
            field: "question_id",
        })?;
        let raw = field(obj, index, "answers")?
            .as_array()
            .ok_or(CorpusError::MissingField {
                index,
                field: "answers",
            })?;
        let mut answers = Vec::with_capacity(raw.len());
        for a in raw {
            let text = match a {
                Value::String(s) => s.clone(),
                Value::Object(o) => o
                    .get("answer")
                    .and_then(Value::as_str)
                    .ok_or(CorpusError::MissingField {
                        index,
                        field: "answers.answer",
                    })?
                    .to_string(),
                _ => {
                    return Err(CorpusError::MissingField {
                        index,
                        field: "answers",
                    })
                }
            };
            if !text.trim().is_empty() {
                answers.push(text);
            }
        }
        if answers_by_id.insert(qid.clone(), dedup_exact(answers)).is_some() {
            return Err(CorpusError::DuplicateSampleId { sample_id: qid });
        }
    }

    let mut samples = Vec::with_capacity(questions.len());
    let mut used = HashSet::new();
    for (index, rec) in questions.iter().enumerate() {
        let obj = as_object(rec, index)?;
        count_unknown(obj, OKVQA_QUESTION_FIELDS, &mut unknown);
        let qid = id_string(field(obj, index, "question_id")?).ok_or(CorpusError::MissingField {
            index,
            field: "question_id",
        })?;
        if !used.insert(qid.clone()) {
            return Err(CorpusError::DuplicateSampleId { sample_id: qid });
        }
        let image_ref = match obj.get("image_id") {
            Some(Value::Number(n)) => match n.as_u64() {
                Some(id) => format!("val2014/COCO_val2014_{id:012}.jpg"),
                None => return Err(CorpusError::MissingImageRef { index }),
            },
            Some(Value::String(s)) if !s.trim().is_empty() => s.clone(),
            _ => return Err(CorpusError::MissingImageRef { index }),
        };
        let question = field(obj, index, "question")?
            .as_str()
            .ok_or(CorpusError::MissingField {
                index,
                field: "question",
            })?
            .to_string();
        let gold_answers = answers_by_id
            .get(&qid)
            .cloned()
            .ok_or_else(|| CorpusError::UnmatchedQuestion {
                question_id: qid.clone(),
            })?;
        if gold_answers.is_empty() {
            return Err(CorpusError::NoGoldAnswers { sample_id: qid });
        }
        samples.push(Sample {
            sample_id: qid,
            dataset: Dataset::Okvqa,
            image_ref,
            question,
            choices: None,
            gold_answers,
            gold_choice_index: None,
            scripted_truth: None,
        });
    }
    if let Some(orphan) = answers_by_id.keys().find(|k| !used.contains(*k)) {
        return Err(CorpusError::UnmatchedQuestion {
            question_id: orphan.clone(),
        });
    }
    Ok(Ingested::finish(Corpus::new(Dataset::Okvqa, Split::Test, samples)?, unknown))
}

const FVQA_FIELDS: &[&str] = &[
    "question",
    "answer",
    "answers",
    "img_file",
    "qa_id",
    "fact",
    "fact_surface",
    "kb_source",
    "ans_source",
    "question_id",
];

/// Loads the FVQA question dictionary (`all_qs_dict_release.json` layout:
/// an object keyed by question id). A bare array with `qa_id` fields is also
/// accepted. Key order of the file is preserved.
pub fn load_fvqa(path: impl AsRef<Path>) -> Result<Ingested> {
    let path = path.as_ref();
    let value = read_json(path)?.ok_or_else(|| CorpusError::EmptyCorpus {
        path: path.to_path_buf(),
    })?;
    let entries: Vec<(Option<String>, Value)> = match value {
        Value::Object(o) => o.into_iter().map(|(k, v)| (Some(k), v)).collect(),
        Value::Array(a) => a.into_iter().map(|v| (None, v)).collect(),
        _ => {
            return Err(CorpusError::Schema {
                path: path.to_path_buf(),
                line: 1,
                field_path: ".".into(),
                message: "expected an object keyed by question id".into(),
            })
        }
    };
    if entries.is_empty() {
        return Err(CorpusError::EmptyCorpus {
            path: path.to_path_buf(),
        });
    }
    let mut unknown = BTreeMap::new();
    let mut samples = Vec::with_capacity(entries.len());
    for (index, (key, rec)) in entries.iter().enumerate() {
        let obj = as_object(rec, index)?;
        count_unknown(obj, FVQA_FIELDS, &mut unknown);
        let sample_id = match key {
            Some(k) => k.clone(),
            None => obj
                .get("qa_id")
                .or_else(|| obj.get("question_id"))
                .and_then(id_string)
                .ok_or(CorpusError::MissingField {
                    index,
                    field: "qa_id",
                })?,
        };
        let image_ref = obj
            .get("img_file")
            .and_then(Value::as_str)
            .filter(|s| !s.trim().is_empty())
            .ok_or(CorpusError::MissingImageRef { index })?
            .to_string();
        let question = field(obj, index, "question")?
            .as_str()
            .ok_or(CorpusError::MissingField {
                index,
                field: "question",
            })?
            .to_string();
        let mut answers = Vec::new();
        if let Some(a) = obj.get("answer").and_then(Value::as_str) {
            answers.push(a.to_string());
        }
        if let Some(variants) = obj.get("answers").and_then(string_list) {
            answers.extend(variants);
        }
        let gold_answers = dedup_case_insensitive(answers.into_iter().filter(|s| !s.trim().is_empty()));
        if gold_answers.is_empty() {
            return Err(CorpusError::MissingField {
                index,
                field: "answer",
            });
        }
        samples.push(Sample {
            sample_id,
            dataset: Dataset::Fvqa,
            image_ref,
            question,
            choices: None,
            gold_answers,
            gold_choice_index: None,
            scripted_truth: None,
        });
    }
    Ok(Ingested::finish(Corpus::new(Dataset::Fvqa, Split::Test, samples)?, unknown))
}

/// One line of the normalized corpus format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizedRecord {
    pub sample_id: String,
    pub dataset: Dataset,
    pub split: Split,
    pub image_ref: String,
    pub question: String,
    pub choices: Option<Vec<String>>,
    pub gold_answers: Vec<String>,
    pub gold_choice_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scripted_truth: Option<ScriptedTruth>,
}

impl NormalizedRecord {
    pub fn from_sample(sample: &Sample, split: Split) -> Self {
        Self {
            sample_id: sample.sample_id.clone(),
            dataset: sample.dataset,
            split,
            image_ref: sample.image_ref.clone(),
            question: sample.question.clone(),
            choices: sample.choices.clone(),
            gold_answers: sample.gold_answers.clone(),
            gold_choice_index: sample.gold_choice_index,
            scripted_truth: sample.scripted_truth,
        }
    }

    pub fn into_sample(self) -> (Sample, Split) {
        let split = self.split;
        (
            Sample {
                sample_id: self.sample_id,
                dataset: self.dataset,
                image_ref: self.image_ref,
                question: self.question,
                choices: self.choices,
                gold_answers: self.gold_answers,
                gold_choice_index: self.gold_choice_index,
                scripted_truth: self.scripted_truth,
            },
            split,
        )
    }
}

/// Serializes a corpus in the normalized one-record-per-line format.
pub fn to_normalized_string(corpus: &Corpus) -> String {
    let mut out = String::new();
    for s in corpus.samples() {
        let rec = NormalizedRecord::from_sample(s, corpus.split);
        out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_normalized(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(to_normalized_string(corpus).as_bytes()).map_err(io)?;
    f.sync_all().map_err(io)
}

/// Reloads a corpus written by [`write_normalized`].
pub fn read_normalized(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut meta: Option<(Dataset, Split)> = None;
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: NormalizedRecord = parse_line(path, i + 1, line)?;
        let (sample, split) = rec.into_sample();
        match meta {
            None => meta = Some((sample.dataset, split)),
            Some((d, s)) => {
                if d != sample.dataset {
                    return Err(CorpusError::Inconsistent {
                        path: path.to_path_buf(),
                        line: i + 1,
                        what: "datasets",
                    });
                }
                if s != split {
                    return Err(CorpusError::Inconsistent {
                        path: path.to_path_buf(),
                        line: i + 1,
                        what: "splits",
                    });
                }
            }
        }
        samples.push(sample);
    }
    let (dataset, split) = meta.ok_or_else(|| CorpusError::EmptyCorpus {
        path: path.to_path_buf(),
    })?;
    Corpus::new(dataset, split, samples)
}

fn parse_line<T: serde::de::DeserializeOwned>(path: &Path, line_no: usize, line: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(line);
    serde_path_to_error::deserialize(de).map_err(|e| CorpusError::Schema {
        path: path.to_path_buf(),
        line: line_no,
        field_path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

#[derive(Debug, Deserialize)]
struct SyntheticRecord {
    sample_id: String,
    #[serde(default)]
    dataset: Option<Dataset>,
    #[serde(default)]
    split: Option<Split>,
    image_ref: String,
    question: String,
    #[serde(default)]
    choices: Option<Vec<String>>,
    gold_answers: Vec<String>,
    #[serde(default)]
    gold_choice_index: Option<usize>,
    #[serde(default)]
    scripted_truth: Option<ScriptedTruth>,
}

const SYNTHETIC_FIELDS: &[&str] = &[
    "sample_id",
    "dataset",
    "split",
    "image_ref",
    "question",
    "choices",
    "gold_answers",
    "gold_choice_index",
    "scripted_truth",
];

/// Loads the harness's line-delimited synthetic corpus format: the
/// normalized record schema with optional `dataset`/`split` and an optional
/// `scripted_truth` object.
pub fn load_synthetic(path: impl AsRef<Path>) -> Result<Ingested> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut unknown = BTreeMap::new();
    let mut split = None;
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let line_no = i + 1;
        let raw: Value = parse_line(path, line_no, line)?;
        if let Some(obj) = raw.as_object() {
            count_unknown(obj, SYNTHETIC_FIELDS, &mut unknown);
        }
        let rec: SyntheticRecord = parse_line(path, line_no, line)?;
        if let Some(d) = rec.dataset {
            if d != Dataset::Synthetic {
                return Err(CorpusError::Schema {
                    path: path.to_path_buf(),
                    line: line_no,
                    field_path: "dataset".into(),
                    message: format!("expected SYNTHETIC, found {d}"),
                });
            }
        }
        if let Some(s) = rec.split {
            match split {
                None => split = Some(s),
                Some(prev) if prev != s => {
                    return Err(CorpusError::Inconsistent {
                        path: path.to_path_buf(),
                        line: line_no,
                        what: "splits",
                    })
                }
                _ => {}
            }
        }
        let sample = Sample {
            sample_id: rec.sample_id,
            dataset: Dataset::Synthetic,
            image_ref: rec.image_ref,
            question: rec.question,
            choices: rec.choices,
            gold_answers: rec.gold_answers,
            gold_choice_index: rec.gold_choice_index,
            scripted_truth: rec.scripted_truth,
        };
        sample.validate()?;
        samples.push(sample);
    }
    if samples.is_empty() {
        return Err(CorpusError::EmptyCorpus {
            path: path.to_path_buf(),
        });
    }
    let corpus = Corpus::new(Dataset::Synthetic, split.unwrap_or(Split::Test), samples)?;
    Ok(Ingested::finish(corpus, unknown))
}
