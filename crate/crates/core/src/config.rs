//! Run configuration, loaded from TOML. Relative paths resolve against the
//! directory holding the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{Label, LabelSpace};
use crate::gateway::{ModelPrice, PriceTable};
use crate::synthesis::SynthesisConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("config field `{field}`: {message}")]
    Field { field: String, message: String },
}

fn field(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field: field.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Models {
    pub simulator: String,
    pub rewriter: String,
    pub judge: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Openai,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub base_url: String,
    pub max_attempts: u32,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Openai,
            base_url: "https://api.openai.com/v1".into(),
            max_attempts: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorChoice {
    RemoteClassifier,
    JudgePlusminus,
    JudgeInternal,
    RandomBaseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub kind: DetectorChoice,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default = "default_fallback")]
    pub fallback: Label,
}

fn default_fallback() -> Label {
    Label::Hallucinated
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockKind {
    #[default]
    Wall,
    /// Report `fixed_latency_ms` for every call.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitChoice {
    #[default]
    All,
    Test,
    Dev,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    /// Defaults to the assembled training set of the run.
    pub testset: Option<PathBuf>,
    pub split: SplitChoice,
    pub detector_space: Option<LabelSpace>,
    pub clock: ClockKind,
    pub fixed_latency_ms: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            testset: None,
            split: SplitChoice::All,
            detector_space: None,
            clock: ClockKind::Wall,
            fixed_latency_ms: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatternsConfig {
    pub reference: Option<String>,
    /// Name to annotation JSONL or distribution JSON. Order follows the
    /// `order` list when given, else name order.
    pub inputs: BTreeMap<String, PathBuf>,
    pub order: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: PathBuf,
    pub label_space: LabelSpace,
    pub run_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompts_dir: Option<PathBuf>,
    pub models: Models,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub synthesis: SynthesisConfig,
    #[serde(default)]
    pub prices: BTreeMap<String, ModelPrice>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detector: Option<DetectorConfig>,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub patterns: PatternsConfig,
    /// Directory the relative paths above are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_concurrency() -> usize {
    4
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.base_dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .to_path_buf();
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn corpus_path(&self) -> PathBuf {
        self.resolve(&self.corpus)
    }

    pub fn run_path(&self) -> PathBuf {
        self.resolve(&self.run_dir)
    }

    pub fn price_table(&self) -> PriceTable {
        self.prices.iter().map(|(m, p)| (m.clone(), *p)).collect()
    }

    /// Checks field values and that referenced inputs exist.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !self.corpus_path().is_file() {
            return Err(field("corpus", format!("{} does not exist", self.corpus_path().display())));
        }
        if let Some(dir) = &self.prompts_dir {
            if !self.resolve(dir).is_dir() {
                return Err(field("prompts_dir", format!("{} is not a directory", dir.display())));
            }
        }
        if self.concurrency == 0 {
            return Err(field("concurrency", "must be at least 1"));
        }
        for (name, model) in [
            ("models.simulator", &self.models.simulator),
            ("models.rewriter", &self.models.rewriter),
            ("models.judge", &self.models.judge),
        ] {
            if model.trim().is_empty() {
                return Err(field(name, "must not be empty"));
            }
        }
        self.price_table()
            .validate()
            .map_err(|m| field("prices", m))?;
        if self.backend.max_attempts == 0 {
            return Err(field("backend.max_attempts", "must be at least 1"));
        }
        self.synthesis
            .validate(self.label_space)
            .map_err(|e| field("synthesis", e.to_string()))?;
        if let Some(d) = &self.detector {
            if d.kind == DetectorChoice::RemoteClassifier && d.endpoint.is_none() {
                return Err(field("detector.endpoint", "required for remote_classifier"));
            }
            if d.kind == DetectorChoice::JudgePlusminus
                && self.evaluation.detector_space.unwrap_or(self.label_space) != LabelSpace::Binary
            {
                return Err(field("detector.kind", "judge_plusminus only supports binary labels"));
            }
        }
        if self.evaluation.fixed_latency_ms <= 0.0 || !self.evaluation.fixed_latency_ms.is_finite() {
            return Err(field("evaluation.fixed_latency_ms", "must be positive"));
        }
        if let Some(r) = &self.patterns.reference {
            if !self.patterns.inputs.contains_key(r) {
                return Err(field("patterns.reference", format!("{r:?} is not among patterns.inputs")));
            }
        }
        for name in &self.patterns.order {
            if !self.patterns.inputs.contains_key(name) {
                return Err(field("patterns.order", format!("{name:?} is not among patterns.inputs")));
            }
        }
        for (name, p) in &self.patterns.inputs {
            if !self.resolve(p).is_file() {
                return Err(field(
                    &format!("patterns.inputs.{name}"),
                    format!("{} does not exist", p.display()),
                ));
            }
        }
        Ok(())
    }

    /// Hash of the effective configuration, flag overrides included.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}
