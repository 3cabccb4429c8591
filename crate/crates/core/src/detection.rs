//! Hallucination detectors: a remote fine-tuned classifier, zero-shot LLM
//! judges and a seeded random baseline.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{render_history, render_knowledge, DialogueExample, Label, LabelSpace, Turn};
use crate::gateway::{ChatRequest, Gateway, GatewayError};
use crate::prompts::{PromptError, PromptKind, PromptSet, TemplateContext};

#[derive(Debug, Error)]
pub enum DetectionError {
    #[error("example {0:?} has no response to classify")]
    MissingResponse(String),
    #[error("{detector:?} detector does not support the {space} label space")]
    UnsupportedSpace {
        detector: DetectorKind,
        space: LabelSpace,
    },
    #[error("unparseable judge answer: {raw:?}")]
    Unparseable { raw: String },
    #[error("label {0} is not ternary; collapsing only maps ternary to binary")]
    NotTernary(Label),
    #[error("classifier transport error: {0}")]
    Transport(String),
    #[error("classifier returned HTTP {status}: {body}")]
    Remote { status: u16, body: String },
    #[error("classifier response invalid: {0}")]
    BadResponse(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    RemoteClassifier,
    JudgePlusminus,
    JudgeInternal,
    RandomBaseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorVerdict {
    pub label: Label,
    pub scores: BTreeMap<Label, f64>,
    pub latency_ms: f64,
    /// Set when a judge answer could not be parsed and the fallback label was used.
    #[serde(default)]
    pub unparsed: bool,
}

/// Highest-scoring label; ties go to the label listed first in `space`.
pub fn argmax(scores: &BTreeMap<Label, f64>, space: LabelSpace) -> Label {
    let mut best = space.labels()[0];
    let mut best_score = f64::NEG_INFINITY;
    for &l in space.labels() {
        let s = scores.get(&l).copied().unwrap_or(0.0);
        if s > best_score {
            best = l;
            best_score = s;
        }
    }
    best
}

fn one_hot(label: Label, space: LabelSpace) -> BTreeMap<Label, f64> {
    space
        .labels()
        .iter()
        .map(|&l| (l, if l == label { 1.0 } else { 0.0 }))
        .collect()
}

/// How per-call latency is measured.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LatencyClock {
    Wall,
    /// Every call reports the same duration. Makes reports byte-stable when
    /// the backend is a mock.
    Fixed(f64),
}

impl LatencyClock {
    pub fn time<T>(&self, f: impl FnOnce() -> T) -> (T, f64) {
        match *self {
            LatencyClock::Wall => {
                let start = Instant::now();
                let out = f();
                let ms = start.elapsed().as_secs_f64() * 1e3;
                (out, ms.max(1e-6))
            }
            LatencyClock::Fixed(ms) => (f(), ms),
        }
    }
}

pub trait Detector: Send + Sync {
    fn kind(&self) -> DetectorKind;

    /// Classifies a single example. Implementations never batch.
    fn classify(
        &self,
        example: &DialogueExample,
        space: LabelSpace,
    ) -> Result<DetectorVerdict, DetectionError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeScheme {
    Plusminus,
    InternalBinary,
    InternalTernary,
}

impl JudgeScheme {
    fn answers(self) -> &'static [(&'static str, Label)] {
        match self {
            JudgeScheme::Plusminus => &[("+1", Label::Faithful), ("-1", Label::Hallucinated)],
            JudgeScheme::InternalBinary => &[("2", Label::Faithful), ("0", Label::Hallucinated)],
            JudgeScheme::InternalTernary => &[
                ("2", Label::FullyAttributable),
                ("1", Label::Generic),
                ("0", Label::NotFullyAttributable),
            ],
        }
    }

    pub fn prompt_kind(self) -> PromptKind {
        match self {
            JudgeScheme::Plusminus => PromptKind::JudgeBinaryPlusminus,
            JudgeScheme::InternalBinary => PromptKind::JudgeInternalBinary,
            JudgeScheme::InternalTernary => PromptKind::JudgeInternalTernary,
        }
    }
}

/// Numeric tokens standing on their own: an optional sign, digits and an
/// optional fraction, not glued to letters or other digits.
fn standalone_numbers(text: &str) -> Vec<&str> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let glued = |c: char| c.is_alphanumeric() || c == '_';
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let (start, c) = chars[i];
        let signed = (c == '+' || c == '-')
            && chars.get(i + 1).is_some_and(|&(_, d)| d.is_ascii_digit());
        let begins = signed || (c.is_ascii_digit() && (i == 0 || !chars[i - 1].1.is_ascii_digit()));
        if !begins {
            i += 1;
            continue;
        }
        let mut j = if signed { i + 1 } else { i };
        while j < chars.len() && chars[j].1.is_ascii_digit() {
            j += 1;
        }
        if j + 1 < chars.len() && chars[j].1 == '.' && chars[j + 1].1.is_ascii_digit() {
            j += 1;
            while j < chars.len() && chars[j].1.is_ascii_digit() {
                j += 1;
            }
        }
        let end = chars.get(j).map_or(text.len(), |&(b, _)| b);
        let before_ok = i == 0 || {
            let p = chars[i - 1].1;
            !glued(p) && p != '.' && (signed || (p != '+' && p != '-'))
        };
        let after_ok = chars.get(j).is_none_or(|&(_, n)| !glued(n));
        if before_ok && after_ok {
            out.push(&text[start..end]);
        }
        i = j.max(i + 1);
    }
    out
}

/// Maps the first answer token of `scheme` found in `text` to its label.
pub fn parse_judge_answer(text: &str, scheme: JudgeScheme) -> Result<Label, DetectionError> {
    standalone_numbers(text)
        .into_iter()
        .find_map(|tok| {
            scheme
                .answers()
                .iter()
                .find(|(a, _)| *a == tok)
                .map(|&(_, l)| l)
        })
        .ok_or_else(|| DetectionError::Unparseable {
            raw: text.to_string(),
        })
}

/// Ternary to binary: generic and not-fully-attributable both become
/// hallucinated.
pub fn collapse_label(label: Label) -> Result<Label, DetectionError> {
    match label {
        Label::FullyAttributable => Ok(Label::Faithful),
        Label::Generic | Label::NotFullyAttributable => Ok(Label::Hallucinated),
        other => Err(DetectionError::NotTernary(other)),
    }
}

/// The counterpart of a binary fallback label in `space`.
fn fallback_in(label: Label, space: LabelSpace) -> Label {
    if space.contains(label) {
        return label;
    }
    match (space, label) {
        (LabelSpace::Ternary, Label::Faithful) => Label::FullyAttributable,
        (LabelSpace::Ternary, _) => Label::NotFullyAttributable,
        (LabelSpace::Binary, Label::FullyAttributable) => Label::Faithful,
        (LabelSpace::Binary, _) => Label::Hallucinated,
    }
}

/// Uniform scores, label drawn from a stream seeded by (seed, example id).
#[derive(Debug, Clone)]
pub struct RandomBaseline {
    pub seed: u64,
    pub clock: LatencyClock,
}

impl RandomBaseline {
    pub fn new(seed: u64) -> Self {
        RandomBaseline {
            seed,
            clock: LatencyClock::Wall,
        }
    }
}

fn id_hash(id: &str) -> u64 {
    let d = Sha256::digest(id.as_bytes());
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

impl Detector for RandomBaseline {
    fn kind(&self) -> DetectorKind {
        DetectorKind::RandomBaseline
    }

    fn classify(
        &self,
        example: &DialogueExample,
        space: LabelSpace,
    ) -> Result<DetectorVerdict, DetectionError> {
        if example.response.is_none() {
            return Err(DetectionError::MissingResponse(example.id.clone()));
        }
        let labels = space.labels();
        let (label, latency_ms) = self.clock.time(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ id_hash(&example.id));
            labels[rng.random_range(0..labels.len())]
        });
        let p = 1.0 / labels.len() as f64;
        Ok(DetectorVerdict {
            label,
            scores: labels.iter().map(|&l| (l, p)).collect(),
            latency_ms,
            unparsed: false,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeStyle {
    /// "+1 / -1" answers, binary only.
    Plusminus,
    /// "2 / 1 / 0" answers, binary or ternary.
    Internal,
}

/// Zero-shot LLM judge, greedy decoding, one call per example.
pub struct JudgeDetector {
    pub gateway: Arc<Gateway>,
    pub prompts: Arc<PromptSet>,
    pub model: String,
    pub style: JudgeStyle,
    /// Used when the answer cannot be parsed.
    pub fallback: Label,
    pub clock: LatencyClock,
}

impl JudgeDetector {
    pub fn new(gateway: Arc<Gateway>, model: impl Into<String>, style: JudgeStyle) -> Self {
        JudgeDetector {
            gateway,
            prompts: Arc::new(PromptSet::default()),
            model: model.into(),
            style,
            fallback: Label::Hallucinated,
            clock: LatencyClock::Wall,
        }
    }

    pub fn scheme(&self, space: LabelSpace) -> Result<JudgeScheme, DetectionError> {
        match (self.style, space) {
            (JudgeStyle::Plusminus, LabelSpace::Binary) => Ok(JudgeScheme::Plusminus),
            (JudgeStyle::Plusminus, LabelSpace::Ternary) => Err(DetectionError::UnsupportedSpace {
                detector: self.kind(),
                space,
            }),
            (JudgeStyle::Internal, LabelSpace::Binary) => Ok(JudgeScheme::InternalBinary),
            (JudgeStyle::Internal, LabelSpace::Ternary) => Ok(JudgeScheme::InternalTernary),
        }
    }
}

impl Detector for JudgeDetector {
    fn kind(&self) -> DetectorKind {
        match self.style {
            JudgeStyle::Plusminus => DetectorKind::JudgePlusminus,
            JudgeStyle::Internal => DetectorKind::JudgeInternal,
        }
    }

    fn classify(
        &self,
        example: &DialogueExample,
        space: LabelSpace,
    ) -> Result<DetectorVerdict, DetectionError> {
        let scheme = self.scheme(space)?;
        let response = example
            .response
            .clone()
            .ok_or_else(|| DetectionError::MissingResponse(example.id.clone()))?;
        let ctx = TemplateContext {
            knowledge_text: render_knowledge(&example.knowledge),
            history_text: render_history(&example.history),
            response_text: Some(response),
        };
        let prompt = self.prompts.render(scheme.prompt_kind(), &ctx)?;
        let req = ChatRequest::new(&self.model, prompt)
            .temperature(0.0)
            .max_tokens(16);
        let (result, latency_ms) = self.clock.time(|| self.gateway.complete(&req));
        let answer = result?;
        let (label, unparsed) = match parse_judge_answer(&answer.text, scheme) {
            Ok(l) => (l, false),
            Err(_) => {
                log::warn!("unparsed judge answer for {:?}: {:?}", example.id, answer.text);
                (fallback_in(self.fallback, space), true)
            }
        };
        Ok(DetectorVerdict {
            label,
            scores: one_hot(label, space),
            latency_ms,
            unparsed,
        })
    }
}

/// Body of `POST /classify`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyRequest {
    pub knowledge: String,
    pub history: Vec<Turn>,
    pub response: String,
    pub label_space: LabelSpace,
}

/// Reply of `POST /classify`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyResponse {
    pub label: Label,
    pub scores: BTreeMap<Label, f64>,
    pub latency_ms: f64,
}

/// Client for the fine-tuned classifier service.
pub struct RemoteClassifier {
    agent: ureq::Agent,
    endpoint: String,
    pub clock: LatencyClock,
}

impl RemoteClassifier {
    pub fn new(endpoint: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(60)))
            .http_status_as_error(false)
            .build()
            .into();
        RemoteClassifier {
            agent,
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            clock: LatencyClock::Wall,
        }
    }

    pub fn health(&self) -> Result<(), DetectionError> {
        let resp = self
            .agent
            .get(&format!("{}/health", self.endpoint))
            .call()
            .map_err(|e| DetectionError::Transport(e.to_string()))?;
        match resp.status().as_u16() {
            200 => Ok(()),
            status => Err(DetectionError::Remote {
                status,
                body: String::new(),
            }),
        }
    }

    fn post(&self, body: &ClassifyRequest) -> Result<ClassifyResponse, DetectionError> {
        let resp = self
            .agent
            .post(&format!("{}/classify", self.endpoint))
            .send_json(body)
            .map_err(|e| DetectionError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let mut body = resp.into_body();
        if status != 200 {
            return Err(DetectionError::Remote {
                status,
                body: body.read_to_string().unwrap_or_default(),
            });
        }
        body.read_json()
            .map_err(|e| DetectionError::BadResponse(e.to_string()))
    }
}

/// Checks a service reply against the label space and renormalizes scores.
pub fn verdict_from_response(
    resp: ClassifyResponse,
    space: LabelSpace,
    latency_ms: f64,
) -> Result<DetectorVerdict, DetectionError> {
    if let Some(foreign) = resp.scores.keys().find(|l| !space.contains(**l)) {
        return Err(DetectionError::BadResponse(format!(
            "score for {foreign} outside the {space} space"
        )));
    }
    if resp.scores.values().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(DetectionError::BadResponse("scores must be non-negative".into()));
    }
    let total: f64 = space
        .labels()
        .iter()
        .map(|l| resp.scores.get(l).copied().unwrap_or(0.0))
        .sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(DetectionError::BadResponse(format!("scores sum to {total}, not 1")));
    }
    let scores: BTreeMap<Label, f64> = space
        .labels()
        .iter()
        .map(|&l| (l, resp.scores.get(&l).copied().unwrap_or(0.0) / total))
        .collect();
    let label = argmax(&scores, space);
    if label != resp.label {
        log::warn!("service label {} disagrees with argmax {label}", resp.label);
    }
    Ok(DetectorVerdict {
        label,
        scores,
        latency_ms,
        unparsed: false,
    })
}

impl Detector for RemoteClassifier {
    fn kind(&self) -> DetectorKind {
        DetectorKind::RemoteClassifier
    }

    fn classify(
        &self,
        example: &DialogueExample,
        space: LabelSpace,
    ) -> Result<DetectorVerdict, DetectionError> {
        let response = example
            .response
            .clone()
            .ok_or_else(|| DetectionError::MissingResponse(example.id.clone()))?;
        let body = ClassifyRequest {
            knowledge: render_knowledge(&example.knowledge),
            history: example.history.clone(),
            response,
            label_space: space,
        };
        let (result, latency_ms) = self.clock.time(|| self.post(&body));
        verdict_from_response(result?, space, latency_ms)
    }
}
