//! Knowledge-grounded dialogue corpora: data model, JSONL IO, split rule and
//! the plain-text renderings that feed prompt placeholders.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jsonl::{self, JsonlError};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error("duplicate example id {0:?}")]
    DuplicateId(String),
    #[error("example {0:?} has no annotation scores")]
    MissingScores(String),
    #[error("example {id:?}: label {label} is not in the {space} label space")]
    ForeignLabel {
        id: String,
        label: Label,
        space: LabelSpace,
    },
}

/// A single class label. Binary and ternary corpora use disjoint vocabularies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Faithful,
    Hallucinated,
    FullyAttributable,
    Generic,
    NotFullyAttributable,
}

impl Label {
    pub const ALL: [Label; 5] = [
        Label::Faithful,
        Label::Hallucinated,
        Label::FullyAttributable,
        Label::Generic,
        Label::NotFullyAttributable,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Faithful => "faithful",
            Label::Hallucinated => "hallucinated",
            Label::FullyAttributable => "fully_attributable",
            Label::Generic => "generic",
            Label::NotFullyAttributable => "not_fully_attributable",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown label {0:?}")]
pub struct UnknownLabel(pub String);

impl FromStr for Label {
    type Err = UnknownLabel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Label::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| UnknownLabel(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSpace {
    Binary,
    Ternary,
}

impl LabelSpace {
    /// Labels in canonical order. The order is alphabetical and doubles as the
    /// tie-break order for score argmax.
    pub fn labels(self) -> &'static [Label] {
        match self {
            LabelSpace::Binary => &[Label::Faithful, Label::Hallucinated],
            LabelSpace::Ternary => &[
                Label::FullyAttributable,
                Label::Generic,
                Label::NotFullyAttributable,
            ],
        }
    }

    pub fn contains(self, label: Label) -> bool {
        self.labels().contains(&label)
    }

    pub fn index_of(self, label: Label) -> Option<usize> {
        self.labels().iter().position(|l| *l == label)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LabelSpace::Binary => "binary",
            LabelSpace::Ternary => "ternary",
        }
    }
}

impl fmt::Display for LabelSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LabelSpace {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "binary" => Ok(LabelSpace::Binary),
            "ternary" => Ok(LabelSpace::Ternary),
            other => Err(format!("unknown label space {other:?}")),
        }
    }
}

/// (subject, relation, object), serialized as a 3-element JSON array.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet(pub String, pub String, pub String);

impl Triplet {
    pub fn new(s: impl Into<String>, r: impl Into<String>, o: impl Into<String>) -> Self {
        Triplet(s.into(), r.into(), o.into())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KnowledgeSource {
    KgTriplets { triplets: Vec<Triplet> },
    Document { document: String },
}

impl KnowledgeSource {
    fn validate(&self) -> Result<(), String> {
        if let KnowledgeSource::KgTriplets { triplets } = self {
            for (i, t) in triplets.iter().enumerate() {
                if [&t.0, &t.1, &t.2].iter().any(|c| c.trim().is_empty()) {
                    return Err(format!("triplet {i} has an empty component"));
                }
                // one rendered line per triplet
                if [&t.0, &t.1, &t.2].iter().any(|c| c.contains(['\n', '\r'])) {
                    return Err(format!("triplet {i} has a line break in a component"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    User,
    Assistant,
}

impl Speaker {
    pub fn as_str(self) -> &'static str {
        match self {
            Speaker::User => "user",
            Speaker::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
}

impl Turn {
    pub fn user(text: impl Into<String>) -> Self {
        Turn {
            speaker: Speaker::User,
            text: text.into(),
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Turn {
            speaker: Speaker::Assistant,
            text: text.into(),
        }
    }
}

/// One grounded-dialogue instance. Field order is the on-disk key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueExample {
    pub id: String,
    pub knowledge: KnowledgeSource,
    pub history: Vec<Turn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_label: Option<Label>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation_scores: Option<Vec<i8>>,
}

impl DialogueExample {
    pub fn new(id: impl Into<String>, knowledge: KnowledgeSource, history: Vec<Turn>) -> Self {
        DialogueExample {
            id: id.into(),
            knowledge,
            history,
            response: None,
            gold_label: None,
            annotation_scores: None,
        }
    }

    pub fn with_response(mut self, response: impl Into<String>) -> Self {
        self.response = Some(response.into());
        self
    }

    pub fn with_label(mut self, label: Label) -> Self {
        self.gold_label = Some(label);
        self
    }

    pub fn with_scores(mut self, scores: Vec<i8>) -> Self {
        self.annotation_scores = Some(scores);
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("empty id".into());
        }
        self.knowledge.validate()?;
        if let Some(i) = self.history.iter().position(|t| t.text.trim().is_empty()) {
            return Err(format!("history turn {i} is empty"));
        }
        if let Some(scores) = &self.annotation_scores {
            if let Some(bad) = scores.iter().find(|s| !matches!(s, -2 | -1 | 1 | 2)) {
                return Err(format!("annotation score {bad} outside {{-2,-1,+1,+2}}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub test: Vec<String>,
    pub dev: Vec<String>,
}

/// Loads a corpus, preserving file order and rejecting duplicate ids.
pub fn load_corpus(path: &Path) -> Result<Vec<DialogueExample>, CorpusError> {
    let examples: Vec<DialogueExample> = jsonl::read_jsonl(path)?;
    let mut seen = HashSet::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        ex.validate().map_err(|message| CorpusError::Invalid {
            line: i + 1,
            message: format!("example {:?}: {message}", ex.id),
        })?;
        if !seen.insert(ex.id.as_str()) {
            return Err(CorpusError::DuplicateId(ex.id.clone()));
        }
    }
    Ok(examples)
}

pub fn write_corpus(path: &Path, examples: &[DialogueExample]) -> Result<(), CorpusError> {
    Ok(jsonl::write_jsonl(path, examples)?)
}

/// Checks that every gold label present belongs to `space`.
pub fn check_labels(examples: &[DialogueExample], space: LabelSpace) -> Result<(), CorpusError> {
    for ex in examples {
        if let Some(label) = ex.gold_label {
            if !space.contains(label) {
                return Err(CorpusError::ForeignLabel {
                    id: ex.id.clone(),
                    label,
                    space,
                });
            }
        }
    }
    Ok(())
}

/// Examples whose mean annotation score is strictly above 1 or strictly below -1
/// go to the test split; the rest go to dev.
pub fn assign_splits(examples: &[DialogueExample]) -> Result<SplitAssignment, CorpusError> {
    let mut split = SplitAssignment::default();
    for ex in examples {
        let scores = match ex.annotation_scores.as_deref() {
            Some(s) if !s.is_empty() => s,
            _ => return Err(CorpusError::MissingScores(ex.id.clone())),
        };
        // mean > 1  <=>  sum > n, kept in integers so the boundary is exact
        let sum: i64 = scores.iter().map(|&s| i64::from(s)).sum();
        let n = scores.len() as i64;
        if sum > n || sum < -n {
            split.test.push(ex.id.clone());
        } else {
            split.dev.push(ex.id.clone());
        }
    }
    Ok(split)
}

fn escape_component(c: &str) -> String {
    c.replace('|', "\\|")
}

pub fn render_knowledge(ks: &KnowledgeSource) -> String {
    match ks {
        KnowledgeSource::KgTriplets { triplets } => triplets
            .iter()
            .map(|t| {
                format!(
                    "{} | {} | {}",
                    escape_component(&t.0),
                    escape_component(&t.1),
                    escape_component(&t.2)
                )
            })
            .collect::<Vec<_>>()
            .join("\n"),
        KnowledgeSource::Document { document } => document.clone(),
    }
}

pub fn render_history(turns: &[Turn]) -> String {
    turns
        .iter()
        .map(|t| format!("[{}]: {}", t.speaker.as_str(), t.text))
        .collect::<Vec<_>>()
        .join("\n")
}
