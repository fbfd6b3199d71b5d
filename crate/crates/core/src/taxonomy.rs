//! Question types and the sub-question bank.
//!
//! Both vocabularies start from a fixed builtin set and grow append-only.
//! Extensions return a new snapshot; builtin entries are never modified.

use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, ChatBackend, ChatTurn, Route};
use crate::corpus::Sample;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TaxonomyError {
    #[error("question type `{0}` already exists")]
    DuplicateType(String),
    #[error("parent type `{0}` does not exist")]
    UnknownParent(String),
    #[error("invalid question type: {0}")]
    InvalidType(String),
    #[error("sub-question `{0}` already exists")]
    DuplicateSubQuestion(String),
    #[error("invalid sub-question: {0}")]
    InvalidSubQuestion(String),
    #[error("classification unavailable: {0}")]
    ClassificationUnavailable(String),
    #[error("classification failed: `{0}` is not in the active taxonomy")]
    ClassificationFailed(String),
    #[error("taxonomy is empty")]
    EmptyTaxonomy,
}

/// Identifier of a question type: one of the builtin codes or a custom name.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TypeId(pub String);

impl TypeId {
    pub const OLR: &'static str = "OLR";
    pub const TR: &'static str = "TR";
    pub const GL: &'static str = "GL";
    pub const AR: &'static str = "AR";
    pub const FR: &'static str = "FR";
    pub const IR: &'static str = "IR";
    pub const SP: &'static str = "SP";
    pub const CAR: &'static str = "CAR";
    pub const AP: &'static str = "AP";
    pub const SR: &'static str = "SR";
    pub const COR: &'static str = "COR";

    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_builtin(&self) -> bool {
        BUILTIN_TYPES.iter().any(|(id, _, _)| *id == self.0)
    }
}

impl fmt::Display for TypeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for TypeId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

impl PartialEq<str> for TypeId {
    fn eq(&self, other: &str) -> bool {
        self.0 == other
    }
}

impl PartialEq<&str> for TypeId {
    fn eq(&self, other: &&str) -> bool {
        self.0 == *other
    }
}

/// Identifier of a sub-question in the bank.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SqId(pub String);

impl SqId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_builtin(&self) -> bool {
        BUILTIN_SUBQUESTIONS.iter().any(|(id, _)| *id == self.0)
    }
}

impl fmt::Display for SqId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for SqId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

impl PartialEq<&str> for SqId {
    fn eq(&self, other: &&str) -> bool {
        self.0 == *other
    }
}

/// Convenience for building chains in code and tests.
pub fn sq_chain(ids: &[&str]) -> Vec<SqId> {
    ids.iter().map(|s| SqId::from(*s)).collect()
}

/// (code, full name, description)
pub const BUILTIN_TYPES: [(&str, &str, &str); 11] = [
    ("OLR", "Object Localization and Recognition", "Locating and identifying the object."),
    ("TR", "Temporal Reasoning", "Analyzing the depicted season or time of day."),
    ("GL", "Geolocation", "Analyzing the environment, region, or country."),
    ("AR", "Analogical Reasoning", "compare the characteristics of objects."),
    ("FR", "Functional Reasoning", "Analyzing the function or purpose of the object."),
    ("IR", "Intentional Reasoning", "Interpreting the object’s next action."),
    ("SP", "State Perception", "Choosing an option to describe object's state."),
    ("CAR", "Causal Reasoning", "Causal reasoning serves to explain phenomena."),
    ("AP", "Action Perception", "Understanding and analyzing object's actions."),
    ("SR", "Spatial Relationship", "Assessing spatial relationships."),
    ("COR", "Commonsense Reasoning", "Commonsense-based behavior understanding."),
];

pub const BUILTIN_SUBQUESTIONS: [(&str, &str); 10] = [
    ("od", "How many objects do you need to focus on?"),
    ("ev", "Do these objects exist in the image?"),
    ("ol", "Briefly describe their/its location."),
    ("cd", "Briefly describe their/its characteristics."),
    ("sd", "Briefly describe the scene."),
    ("rd", "Briefly describe their relationships."),
    ("kr", "Do you need any knowledge to answer question?"),
    ("srd", "Briefly describe their spatial relationships."),
    ("tid", "Is there any object that indicates the time?"),
    ("sid", "Is there any object that indicates the location?"),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionType {
    pub id: TypeId,
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<TypeId>,
}

impl QuestionType {
    pub fn custom(name: impl Into<String>, description: impl Into<String>, parent: Option<&str>) -> Self {
        Self {
            id: TypeId::new(name),
            description: description.into(),
            parent: parent.map(TypeId::from),
        }
    }
}

/// Ordered, append-only set of question types.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Taxonomy {
    types: Vec<QuestionType>,
}

impl Default for Taxonomy {
    fn default() -> Self {
        Self::builtin()
    }
}

impl Taxonomy {
    pub fn builtin() -> Self {
        Self {
            types: BUILTIN_TYPES
                .iter()
                .map(|(id, _, desc)| QuestionType {
                    id: TypeId::from(*id),
                    description: desc.to_string(),
                    parent: None,
                })
                .collect(),
        }
    }

    /// Rebuilds a taxonomy from persisted entries, re-checking every invariant.
    pub fn from_entries(entries: Vec<QuestionType>) -> Result<Self, TaxonomyError> {
        let builtin = Self::builtin();
        let mut tax = Self { types: Vec::new() };
        for entry in entries {
            if entry.id.is_builtin() {
                let canonical = builtin.get(&entry.id).expect("builtin present");
                if canonical != &entry {
                    return Err(TaxonomyError::InvalidType(format!(
                        "builtin `{}` does not carry its canonical description",
                        entry.id
                    )));
                }
                if tax.contains(&entry.id) {
                    return Err(TaxonomyError::DuplicateType(entry.id.0));
                }
                tax.types.push(entry);
            } else {
                tax = tax.extend(entry)?;
            }
        }
        Ok(tax)
    }

    pub fn types(&self) -> &[QuestionType] {
        &self.types
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    pub fn get(&self, id: &TypeId) -> Option<&QuestionType> {
        self.types.iter().find(|t| &t.id == id)
    }

    pub fn contains(&self, id: &TypeId) -> bool {
        self.get(id).is_some()
    }

    /// Case-insensitive lookup of a type code.
    pub fn resolve(&self, name: &str) -> Option<&TypeId> {
        self.types
            .iter()
            .find(|t| t.id.0.eq_ignore_ascii_case(name))
            .map(|t| &t.id)
    }

    /// The builtin ancestor of a type (itself when builtin or parentless custom).
    pub fn root_of<'a>(&'a self, id: &'a TypeId) -> &'a TypeId {
        let mut cur = id;
        // Parents always precede children, so this terminates.
        while let Some(parent) = self.get(cur).and_then(|t| t.parent.as_ref()) {
            cur = parent;
        }
        cur
    }

    /// Returns a new snapshot with `new_type` appended.
    pub fn extend(&self, new_type: QuestionType) -> Result<Self, TaxonomyError> {
        let name = new_type.id.as_str();
        if name.trim().is_empty() || name.chars().any(|c| c.is_whitespace() || c == ',') {
            return Err(TaxonomyError::InvalidType(format!("bad type name `{name}`")));
        }
        if new_type.description.trim().is_empty() {
            return Err(TaxonomyError::InvalidType(format!("type `{name}` has no description")));
        }
        if new_type.id.is_builtin() || self.resolve(name).is_some() {
            return Err(TaxonomyError::DuplicateType(name.to_string()));
        }
        if let Some(parent) = &new_type.parent {
            if !self.contains(parent) {
                return Err(TaxonomyError::UnknownParent(parent.0.clone()));
            }
        }
        let mut next = self.clone();
        next.types.push(new_type);
        Ok(next)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubQuestion {
    pub id: SqId,
    pub text: String,
}

/// Ordered, append-only sub-question vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SubQuestionBank {
    entries: Vec<SubQuestion>,
}

impl Default for SubQuestionBank {
    fn default() -> Self {
        Self::builtin()
    }
}

impl SubQuestionBank {
    pub fn builtin() -> Self {
        Self {
            entries: BUILTIN_SUBQUESTIONS
                .iter()
                .map(|(id, text)| SubQuestion {
                    id: SqId::from(*id),
                    text: text.to_string(),
                })
                .collect(),
        }
    }

    pub fn from_entries(entries: Vec<SubQuestion>) -> Result<Self, TaxonomyError> {
        let builtin = Self::builtin();
        let mut bank = Self { entries: Vec::new() };
        for entry in entries {
            if entry.id.is_builtin() {
                if builtin.get(&entry.id) != Some(&entry) {
                    return Err(TaxonomyError::InvalidSubQuestion(format!(
                        "builtin `{}` does not carry its canonical text",
                        entry.id
                    )));
                }
                if bank.contains(&entry.id) {
                    return Err(TaxonomyError::DuplicateSubQuestion(entry.id.0));
                }
                bank.entries.push(entry);
            } else {
                bank = bank.extend(entry)?;
            }
        }
        Ok(bank)
    }

    pub fn entries(&self) -> &[SubQuestion] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &SqId) -> Option<&SubQuestion> {
        self.entries.iter().find(|e| &e.id == id)
    }

    pub fn contains(&self, id: &SqId) -> bool {
        self.get(id).is_some()
    }

    pub fn text(&self, id: &SqId) -> Option<&str> {
        self.get(id).map(|e| e.text.as_str())
    }

    pub fn resolve(&self, token: &str) -> Option<&SqId> {
        self.entries
            .iter()
            .find(|e| e.id.0.eq_ignore_ascii_case(token))
            .map(|e| &e.id)
    }

    pub fn extend(&self, new_sq: SubQuestion) -> Result<Self, TaxonomyError> {
        let id = new_sq.id.as_str();
        if id.trim().is_empty() || id.chars().any(|c| c.is_whitespace() || c == ',' || c == '>') {
            return Err(TaxonomyError::InvalidSubQuestion(format!("bad id `{id}`")));
        }
        if id == "other" {
            return Err(TaxonomyError::InvalidSubQuestion("`other` is reserved".into()));
        }
        if new_sq.text.trim().is_empty() {
            return Err(TaxonomyError::InvalidSubQuestion(format!("`{id}` has empty text")));
        }
        if self.resolve(id).is_some() {
            return Err(TaxonomyError::DuplicateSubQuestion(id.to_string()));
        }
        let mut next = self.clone();
        next.entries.push(new_sq);
        Ok(next)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AssignmentSource {
    Backend,
    Fixture,
    Rule,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeAssignment {
    pub sample_id: String,
    pub question_type: TypeId,
    pub source: AssignmentSource,
    pub classifier_raw: String,
}

/// Keyword rules, first match wins. Patterns are matched case-insensitively
/// against the whole question.
const RULES: &[(&str, &str)] = &[
    (TypeId::TR, r"\b(season|seasons|time of day|what time|time of year|month|year|century|era|decade|day or night|morning|evening|night|winter|summer|autumn|spring|holiday)\b"),
    (TypeId::GL, r"\b(country|countries|city|where|region|continent|state|nation|location|located in)\b"),
    (TypeId::CAR, r"\b(why|cause|caused|because|reason)\b"),
    (TypeId::IR, r"\b(going to|about to|will .* next|next|intend|plan to|trying to)\b"),
    (TypeId::FR, r"\b(used for|use of|purpose|function|what is .* for|for what)\b"),
    (TypeId::AP, r"\b(doing|action|activity|sport|playing)\b"),
    (TypeId::SR, r"\b(left|right|behind|next to|above|below|under|on top of|between|beside|in front of)\b"),
    (TypeId::AR, r"\b(similar|compare|compared|resemble|same as|different from|like a)\b"),
    (TypeId::SP, r"\b(state|condition|wet|dry|open|closed|broken|empty|full|ripe|fresh|feeling|mood)\b"),
    (TypeId::COR, r"\b(usually|typically|commonly|most likely|probably|often|normally)\b"),
];

fn compiled_rules() -> &'static [(&'static str, Regex)] {
    static CELL: OnceLock<Vec<(&'static str, Regex)>> = OnceLock::new();
    CELL.get_or_init(|| {
        RULES
            .iter()
            .map(|(t, p)| (*t, Regex::new(&format!("(?i){p}")).expect("valid rule pattern")))
            .collect()
    })
}

/// Deterministic keyword classification; defaults to OLR.
pub fn classify_rule(sample: &Sample) -> TypeAssignment {
    let ty = rule_type(&sample.question);
    TypeAssignment {
        sample_id: sample.sample_id.clone(),
        question_type: TypeId::from(ty),
        source: AssignmentSource::Rule,
        classifier_raw: String::new(),
    }
}

fn rule_type(question: &str) -> &'static str {
    compiled_rules()
        .iter()
        .find(|(_, re)| re.is_match(question))
        .map(|(t, _)| *t)
        .unwrap_or(TypeId::OLR)
}

pub fn classification_prompt(sample: &Sample, taxonomy: &Taxonomy) -> String {
    let mut p = String::from(
        "Classify the visual question below into exactly one question type. \
         Reply with the type id only.\n\nQuestion types:\n",
    );
    for t in taxonomy.types() {
        p.push_str(&format!("- {}: {}\n", t.id, t.description));
    }
    p.push_str(&format!("\nQuestion: {}\n", sample.question));
    p
}

/// Finds the first token of the reply naming an active type.
fn parse_type_reply<'a>(reply: &str, taxonomy: &'a Taxonomy) -> Option<&'a TypeId> {
    reply
        .split(|c: char| !(c.is_alphanumeric() || c == '_' || c == '-'))
        .filter(|t| !t.is_empty())
        .find_map(|tok| taxonomy.resolve(tok))
}

/// Backend classification with one retry and a keyword fallback.
pub fn classify(
    sample: &Sample,
    taxonomy: &Taxonomy,
    backend: &dyn ChatBackend,
) -> Result<TypeAssignment, TaxonomyError> {
    if taxonomy.is_empty() {
        return Err(TaxonomyError::EmptyTaxonomy);
    }
    let system = "You label visual questions with a reasoning category.";
    let prompt = classification_prompt(sample, taxonomy);
    let mut raw_replies = Vec::new();
    for (attempt, stage) in ["classify", "classify:retry"].into_iter().enumerate() {
        let mut turns = vec![
            ChatTurn::system(Route::new(&sample.sample_id, stage).header(system)),
            ChatTurn::user(prompt.clone(), Some(sample.image_ref.clone())),
        ];
        if attempt > 0 {
            turns.push(ChatTurn::assistant(raw_replies.last().cloned().unwrap_or_default()));
            turns.push(ChatTurn::user(
                "That reply did not name one of the listed type ids. Answer with a single id from the list.",
                None,
            ));
        }
        let reply = match backend.complete(&turns) {
            Ok(r) => r,
            Err(e @ BackendError::ScriptMiss { .. }) if attempt > 0 => {
                log::debug!("no classification retry scripted: {e}");
                break;
            }
            Err(e) => return Err(TaxonomyError::ClassificationUnavailable(e.to_string())),
        };
        if let Some(ty) = parse_type_reply(&reply, taxonomy) {
            return Ok(TypeAssignment {
                sample_id: sample.sample_id.clone(),
                question_type: ty.clone(),
                source: AssignmentSource::Backend,
                classifier_raw: reply,
            });
        }
        raw_replies.push(reply);
    }
    let fallback = rule_type(&sample.question);
    match taxonomy.resolve(fallback) {
        Some(ty) => Ok(TypeAssignment {
            sample_id: sample.sample_id.clone(),
            question_type: ty.clone(),
            source: AssignmentSource::Rule,
            classifier_raw: raw_replies.join("\n---\n"),
        }),
        None => Err(TaxonomyError::ClassificationFailed(fallback.to_string())),
    }
}
