//! Simulating system responses and rewriting them into faithful, hallucinated
//! and generic variants, then assembling labeled training rows.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{render_history, render_knowledge, DialogueExample, Label, LabelSpace};
use crate::gateway::{ChatRequest, Gateway, GatewayError};
use crate::prompts::{PromptError, PromptKind, PromptSet, TemplateContext};

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("example {id:?}: {source}")]
    Gateway {
        id: String,
        #[source]
        source: GatewayError,
    },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("empty rewrite")]
    EmptyRewrite,
    #[error("example {id:?} ({category}, sample {sample_index}): {reason}")]
    Quality {
        id: String,
        category: Category,
        sample_index: u32,
        reason: String,
    },
    #[error("example {0:?} has no system response")]
    MissingResponse(String),
    #[error("record {record:?} refers to unknown example {source_id:?}")]
    UnknownSource { record: String, source_id: String },
    #[error("no synthetic records to assemble")]
    EmptyRecords,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Faithful,
    Hallucinated,
    Generic,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Faithful, Category::Hallucinated, Category::Generic];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Faithful => "faithful",
            Category::Hallucinated => "hallucinated",
            Category::Generic => "generic",
        }
    }

    pub fn prompt_kind(self) -> PromptKind {
        match self {
            Category::Faithful => PromptKind::Faithful,
            Category::Hallucinated => PromptKind::Hallucinate,
            Category::Generic => PromptKind::Generic,
        }
    }

    /// The training label this category maps to in `space`. Generic has no
    /// binary counterpart.
    pub fn label(self, space: LabelSpace) -> Option<Label> {
        match (space, self) {
            (LabelSpace::Binary, Category::Faithful) => Some(Label::Faithful),
            (LabelSpace::Binary, Category::Hallucinated) => Some(Label::Hallucinated),
            (LabelSpace::Binary, Category::Generic) => None,
            (LabelSpace::Ternary, Category::Faithful) => Some(Label::FullyAttributable),
            (LabelSpace::Ternary, Category::Hallucinated) => Some(Label::NotFullyAttributable),
            (LabelSpace::Ternary, Category::Generic) => Some(Label::Generic),
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown category {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    NoFaithful,
    NoHallucination,
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoFaithful => "no_faithful",
            Ablation::NoHallucination => "no_hallucination",
        }
    }

    /// The rewrite category replaced by raw system responses, if any.
    pub fn replaced(self) -> Option<Category> {
        match self {
            Ablation::None => None,
            Ablation::NoFaithful => Some(Category::Faithful),
            Ablation::NoHallucination => Some(Category::Hallucinated),
        }
    }
}

impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Ablation::None),
            "no_faithful" => Ok(Ablation::NoFaithful),
            "no_hallucination" => Ok(Ablation::NoHallucination),
            other => Err(format!(
                "unknown ablation {other:?} (expected none, no_faithful or no_hallucination)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RecordUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub cost_usd: f64,
}

/// One rewritten response. Field order is the on-disk key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRecord {
    pub id: String,
    pub source_id: String,
    pub category: Category,
    pub text: String,
    pub model: String,
    pub temperature: f64,
    pub sample_index: u32,
    pub usage: RecordUsage,
}

impl SyntheticRecord {
    pub fn make_id(source_id: &str, category: Category, sample_index: u32) -> String {
        format!("{source_id}::{category}::{sample_index}")
    }

    fn order_key(&self) -> (&str, Category, u32) {
        (&self.source_id, self.category, self.sample_index)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    pub samples_per_category: u32,
    pub temperature_single: f64,
    pub temperature_multi: f64,
    pub categories: BTreeSet<Category>,
    pub ablation: Ablation,
    pub max_tokens: u32,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            samples_per_category: 1,
            temperature_single: 0.0,
            temperature_multi: 0.5,
            categories: [Category::Faithful, Category::Hallucinated].into(),
            ablation: Ablation::None,
            max_tokens: 512,
        }
    }
}

impl SynthesisConfig {
    /// Greedy for a single draw, `temperature_multi` when several are wanted.
    pub fn temperature(&self) -> f64 {
        if self.samples_per_category > 1 {
            self.temperature_multi
        } else {
            self.temperature_single
        }
    }

    pub fn validate(&self, space: LabelSpace) -> Result<(), SynthesisError> {
        if self.samples_per_category == 0 {
            return Err(SynthesisError::Config(
                "samples_per_category must be at least 1".into(),
            ));
        }
        for t in [self.temperature_single, self.temperature_multi] {
            if !(0.0..=2.0).contains(&t) {
                return Err(SynthesisError::Config(format!("temperature {t} outside [0, 2]")));
            }
        }
        if self.categories.is_empty() {
            return Err(SynthesisError::Config("no categories enabled".into()));
        }
        if space == LabelSpace::Binary && self.categories.contains(&Category::Generic) {
            return Err(SynthesisError::Config(
                "generic rewrites need a ternary label space".into(),
            ));
        }
        Ok(())
    }
}

/// A generation cell that failed and was left out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skip {
    pub source_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub category: Option<Category>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample_index: Option<u32>,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct SimulationOutcome {
    /// Input examples in input order; failed ones keep their original response.
    pub examples: Vec<DialogueExample>,
    pub skipped: Vec<Skip>,
}

#[derive(Debug, Clone, Default)]
pub struct SynthesisOutcome {
    pub records: Vec<SyntheticRecord>,
    pub skipped: Vec<Skip>,
}

const MARKERS: [&str; 4] = [
    "#Hallucinated Response#:",
    "#Faithful Response#:",
    "#Rewritten Response#:",
    "#Response#:",
];

/// Strips one echoed template marker, surrounding whitespace and one pair of
/// wrapping quotes from a completion.
pub fn parse_rewrite(raw: &str) -> Result<String, SynthesisError> {
    let mut text = raw.trim();
    for m in MARKERS {
        if text
            .get(..m.len())
            .is_some_and(|p| p.eq_ignore_ascii_case(m))
        {
            text = text[m.len()..].trim();
            break;
        }
    }
    for (open, close) in [('"', '"'), ('\'', '\''), ('\u{201c}', '\u{201d}')] {
        if text.chars().count() >= 2 && text.starts_with(open) && text.ends_with(close) {
            text = text[open.len_utf8()..text.len() - close.len_utf8()].trim();
            break;
        }
    }
    if text.is_empty() {
        return Err(SynthesisError::EmptyRewrite);
    }
    Ok(text.to_string())
}

fn context_for(example: &DialogueExample) -> TemplateContext {
    TemplateContext {
        knowledge_text: render_knowledge(&example.knowledge),
        history_text: render_history(&example.history),
        response_text: example.response.clone(),
    }
}

/// Drives the simulator and rewriter models through a [`Gateway`].
pub struct Synthesizer<'a> {
    pub gateway: &'a Gateway,
    pub prompts: &'a PromptSet,
    pub simulator_model: String,
    pub rewriter_model: String,
    pub config: SynthesisConfig,
    pub space: LabelSpace,
}

impl Synthesizer<'_> {
    fn pool(&self) -> rayon::ThreadPool {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.gateway.concurrency())
            .build()
            .expect("thread pool")
    }

    pub fn simulate_response(&self, example: &DialogueExample) -> Result<String, SynthesisError> {
        let prompt = self.prompts.render(PromptKind::Simulate, &context_for(example))?;
        let req = ChatRequest::new(&self.simulator_model, prompt)
            .temperature(self.config.temperature_single)
            .max_tokens(self.config.max_tokens);
        let resp = self
            .gateway
            .cached_complete(&req)
            .map_err(|source| SynthesisError::Gateway {
                id: example.id.clone(),
                source,
            })?;
        parse_rewrite(&resp.text).map_err(|_| SynthesisError::Quality {
            id: example.id.clone(),
            category: Category::Faithful,
            sample_index: 0,
            reason: "empty simulated response".into(),
        })
    }

    /// Simulates every example; a failure only affects its own example.
    pub fn simulate_corpus(&self, examples: &[DialogueExample]) -> SimulationOutcome {
        let results: Vec<Result<String, SynthesisError>> = self.pool().install(|| {
            examples
                .par_iter()
                .map(|ex| self.simulate_response(ex))
                .collect()
        });
        let mut out = SimulationOutcome::default();
        for (ex, result) in examples.iter().zip(results) {
            let mut ex = ex.clone();
            match result {
                Ok(text) => ex.response = Some(text),
                Err(e) => {
                    log::warn!("simulation skipped for {:?}: {e}", ex.id);
                    out.skipped.push(Skip {
                        source_id: ex.id.clone(),
                        category: None,
                        sample_index: None,
                        reason: e.to_string(),
                    });
                }
            }
            out.examples.push(ex);
        }
        out
    }

    pub fn rewrite(
        &self,
        example: &DialogueExample,
        category: Category,
        sample_index: u32,
    ) -> Result<SyntheticRecord, SynthesisError> {
        if category.label(self.space).is_none() {
            return Err(SynthesisError::Config(format!(
                "{category} rewrites are not available for a {} label space",
                self.space
            )));
        }
        if !self.config.categories.contains(&category) {
            return Err(SynthesisError::Config(format!("category {category} is not enabled")));
        }
        if example.response.is_none() {
            return Err(SynthesisError::MissingResponse(example.id.clone()));
        }
        let prompt = self
            .prompts
            .render(category.prompt_kind(), &context_for(example))?;
        let temperature = self.config.temperature();
        let req = ChatRequest::new(&self.rewriter_model, prompt)
            .temperature(temperature)
            .max_tokens(self.config.max_tokens)
            .sample_index(sample_index);
        let resp = self
            .gateway
            .cached_complete(&req)
            .map_err(|source| SynthesisError::Gateway {
                id: example.id.clone(),
                source,
            })?;
        let text = parse_rewrite(&resp.text).map_err(|e| SynthesisError::Quality {
            id: example.id.clone(),
            category,
            sample_index,
            reason: e.to_string(),
        })?;
        let cost_usd = self
            .gateway
            .cost(&self.rewriter_model, &resp)
            .map_err(|source| SynthesisError::Gateway {
                id: example.id.clone(),
                source,
            })?;
        Ok(SyntheticRecord {
            id: SyntheticRecord::make_id(&example.id, category, sample_index),
            source_id: example.id.clone(),
            category,
            text,
            model: self.rewriter_model.clone(),
            temperature,
            sample_index,
            usage: RecordUsage {
                prompt_tokens: resp.prompt_tokens,
                completion_tokens: resp.completion_tokens,
                cost_usd,
            },
        })
    }

    /// Rewrites every (example, enabled category, sample) cell. Records come
    /// back ordered by (source_id, category, sample_index) whatever the
    /// completion order; failed cells are skipped and reported.
    pub fn synthesize(
        &self,
        examples: &[DialogueExample],
    ) -> Result<SynthesisOutcome, SynthesisError> {
        self.config.validate(self.space)?;
        let mut cells = Vec::new();
        for ex in examples {
            for &category in &self.config.categories {
                for sample in 0..self.config.samples_per_category {
                    cells.push((ex, category, sample));
                }
            }
        }
        let results: Vec<Result<SyntheticRecord, SynthesisError>> = self.pool().install(|| {
            cells
                .par_iter()
                .map(|&(ex, category, sample)| self.rewrite(ex, category, sample))
                .collect()
        });
        let mut out = SynthesisOutcome::default();
        for (&(ex, category, sample), result) in cells.iter().zip(results) {
            match result {
                Ok(record) => out.records.push(record),
                Err(e @ SynthesisError::Config(_)) => return Err(e),
                Err(e) => {
                    log::warn!("skipping {:?}/{category}/{sample}: {e}", ex.id);
                    out.skipped.push(Skip {
                        source_id: ex.id.clone(),
                        category: Some(category),
                        sample_index: Some(sample),
                        reason: e.to_string(),
                    });
                }
            }
        }
        out.records
            .sort_by(|a, b| a.order_key().cmp(&b.order_key()));
        Ok(out)
    }
}

#[derive(Debug, Clone, Default)]
pub struct AssembledSet {
    pub rows: Vec<DialogueExample>,
    pub rows_before_dedup: usize,
}

fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Turns synthetic records into labeled training rows in the corpus schema.
///
/// Under an ablation the replaced category's rewrites are dropped and each
/// source example contributes its raw system response with that category's
/// label instead.
pub fn assemble_training_set(
    records: &[SyntheticRecord],
    examples: &[DialogueExample],
    ablation: Ablation,
    space: LabelSpace,
) -> Result<AssembledSet, SynthesisError> {
    if records.is_empty() {
        return Err(SynthesisError::EmptyRecords);
    }
    let by_id: HashMap<&str, &DialogueExample> =
        examples.iter().map(|e| (e.id.as_str(), e)).collect();
    let label_for = |category: Category| {
        category.label(space).ok_or_else(|| {
            SynthesisError::Config(format!("{category} records cannot be labeled in a {space} space"))
        })
    };

    let mut keyed: Vec<((String, Category, u32), DialogueExample)> = Vec::new();
    let mut sources: BTreeSet<&str> = BTreeSet::new();
    for r in records {
        let source = by_id
            .get(r.source_id.as_str())
            .ok_or_else(|| SynthesisError::UnknownSource {
                record: r.id.clone(),
                source_id: r.source_id.clone(),
            })?;
        sources.insert(source.id.as_str());
        if ablation.replaced() == Some(r.category) {
            continue;
        }
        let mut row = (*source).clone();
        row.id = r.id.clone();
        row.response = Some(r.text.clone());
        row.gold_label = Some(label_for(r.category)?);
        row.annotation_scores = None;
        keyed.push(((r.source_id.clone(), r.category, r.sample_index), row));
    }
    if let Some(category) = ablation.replaced() {
        let label = label_for(category)?;
        for id in sources {
            let source = by_id[id];
            let response = source
                .response
                .clone()
                .ok_or_else(|| SynthesisError::MissingResponse(id.to_string()))?;
            let mut row = source.clone();
            row.id = format!("{id}::{category}::system");
            row.response = Some(response);
            row.gold_label = Some(label);
            row.annotation_scores = None;
            keyed.push(((id.to_string(), category, 0), row));
        }
    }
    keyed.sort_by(|a, b| a.0.cmp(&b.0));

    let rows_before_dedup = keyed.len();
    let mut seen = HashSet::new();
    let mut rows = Vec::with_capacity(keyed.len());
    for (_, row) in keyed {
        let key = (
            render_knowledge(&row.knowledge),
            render_history(&row.history),
            normalize_ws(row.response.as_deref().unwrap_or("")),
            row.gold_label,
        );
        if seen.insert(key) {
            rows.push(row);
        }
    }
    Ok(AssembledSet {
        rows,
        rows_before_dedup,
    })
}
