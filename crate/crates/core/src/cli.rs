//! `haloforge` command line: one subcommand per pipeline stage, all artifacts
//! under the configured run directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{BackendKind, ClockKind, ConfigError, DetectorChoice, RunConfig, SplitChoice};
use crate::corpus::{assign_splits, check_labels, load_corpus, CorpusError, DialogueExample};
use crate::detection::{
    Detector, JudgeDetector, JudgeStyle, LatencyClock, RandomBaseline, RemoteClassifier,
};
use crate::evaluation::{evaluate, EvalError, EvalOptions};
use crate::gateway::mock::DeterministicBackend;
use crate::gateway::{
    Backend, Gateway, GatewayError, LedgerSnapshot, OpenAiBackend, ResponseCache, RetryPolicy,
};
use crate::jsonl::{read_jsonl, to_jsonl_string, write_atomic, JsonlError};
use crate::patterns::{
    distribution_from_annotations, export_pattern_report, load_annotations, PatternDistribution,
    PatternError,
};
use crate::prompts::{PromptError, PromptSet};
use crate::synthesis::{
    assemble_training_set, Ablation, Skip, SynthesisError, Synthesizer, SyntheticRecord,
};

#[derive(Debug, Parser)]
#[command(name = "haloforge", version, about = "Synthetic hallucination data and detector evaluation")]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "haloforge.toml")]
    pub config: PathBuf,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides `concurrency`.
    #[arg(long, global = true)]
    pub concurrency: Option<usize>,
    /// Exit non-zero when any item was skipped.
    #[arg(long, global = true)]
    pub strict: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fill in system responses with the simulator model.
    Simulate,
    /// Rewrite system responses into labeled variants.
    Synthesize,
    /// Build the labeled training file.
    Assemble {
        #[arg(long, value_parser = Ablation::from_str)]
        ablation: Option<Ablation>,
    },
    /// Run the configured detector over a labeled test set.
    Evaluate {
        /// Score ternary labels as binary.
        #[arg(long)]
        collapse: bool,
    },
    /// Compare hallucination-pattern distributions.
    AnalyzePatterns {
        #[arg(long)]
        reference: Option<String>,
    },
    /// Summarize token usage and cost across stages.
    ReportCost,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Patterns(#[from] PatternError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0} item(s) skipped and --strict is set")]
    Strict(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Strict(_) => 3,
            _ => 1,
        }
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::Config(m) => CliError::Config(ConfigError::Field {
                field: "backend".into(),
                message: m,
            }),
            other => CliError::Synthesis(SynthesisError::Gateway {
                id: String::new(),
                source: other,
            }),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Parses args, runs, prints a diagnostic on failure and returns the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(summary) => {
            print!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(n) = cli.concurrency {
        cfg.concurrency = n;
    }
    if let Command::AnalyzePatterns {
        reference: Some(r),
    } = &cli.command
    {
        cfg.patterns.reference = Some(r.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs one subcommand; returns the human-readable summary.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    let cfg = load_config(cli)?;
    let run_dir = cfg.run_path();
    std::fs::create_dir_all(&run_dir).map_err(io_err(&run_dir))?;
    let mut stage = Stage::new(&cfg);
    let summary = match &cli.command {
        Command::Simulate => simulate(&cfg, &mut stage)?,
        Command::Synthesize => synthesize(&cfg, &mut stage)?,
        Command::Assemble { ablation } => {
            assemble(&cfg, &mut stage, ablation.unwrap_or(cfg.synthesis.ablation))?
        }
        Command::Evaluate { collapse } => evaluate_cmd(&cfg, &mut stage, *collapse)?,
        Command::AnalyzePatterns { .. } => analyze_patterns(&cfg, &mut stage)?,
        Command::ReportCost => report_cost(&cfg, &mut stage)?,
    };
    let skipped = stage.skipped;
    stage.finish()?;
    if cli.strict && skipped > 0 {
        return Err(CliError::Strict(skipped));
    }
    Ok(summary)
}

/// Bookkeeping for one stage: written artifacts and the manifest update.
struct Stage<'a> {
    cfg: &'a RunConfig,
    name: &'static str,
    inputs: BTreeMap<String, InputEntry>,
    artifacts: BTreeMap<String, String>,
    skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_sha256: String,
    pub inputs: BTreeMap<String, InputEntry>,
    pub artifacts: BTreeMap<String, String>,
    pub stages: BTreeMap<String, Vec<String>>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl<'a> Stage<'a> {
    fn new(cfg: &'a RunConfig) -> Self {
        Stage {
            cfg,
            name: "",
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            skipped: 0,
        }
    }

    fn input(&mut self, key: &str, shown: &Path, resolved: &Path) -> Result<Vec<u8>, CliError> {
        let bytes = std::fs::read(resolved).map_err(io_err(resolved))?;
        self.inputs.insert(
            key.to_string(),
            InputEntry {
                path: shown.display().to_string(),
                sha256: sha256_hex(&bytes),
            },
        );
        Ok(bytes)
    }

    fn write(&mut self, file: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.cfg.run_path().join(file);
        write_atomic(&path, bytes).map_err(io_err(&path))?;
        self.artifacts.insert(file.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, file: &str, value: &T) -> Result<(), CliError> {
        let mut s = serde_json::to_string_pretty(value).expect("serializable");
        s.push('\n');
        self.write(file, s.as_bytes())
    }

    fn write_jsonl<T: Serialize>(&mut self, file: &str, rows: &[T]) -> Result<(), CliError> {
        self.write(file, to_jsonl_string(rows)?.as_bytes())
    }

    fn skips(&mut self, skips: &[Skip]) -> Result<(), CliError> {
        self.skipped += skips.len();
        for s in skips {
            eprintln!("skipped {}: {}", s.source_id, s.reason);
        }
        self.write_jsonl(&format!("skips_{}.jsonl", self.name), skips)
    }

    fn finish(self) -> Result<(), CliError> {
        let path = self.cfg.run_path().join("manifest.json");
        let mut manifest: Manifest = match std::fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes).unwrap_or_else(|e| {
                log::warn!("ignoring unreadable manifest: {e}");
                Manifest::default()
            }),
            Err(_) => Manifest::default(),
        };
        manifest.config_sha256 = self.cfg.hash();
        manifest.inputs.extend(self.inputs);
        manifest
            .stages
            .insert(self.name.to_string(), self.artifacts.keys().cloned().collect());
        manifest.artifacts.extend(self.artifacts);
        let mut s = serde_json::to_string_pretty(&manifest).expect("serializable");
        s.push('\n');
        write_atomic(&path, s.as_bytes()).map_err(io_err(&path))
    }
}

fn build_gateway(cfg: &RunConfig) -> Result<Gateway, CliError> {
    let backend: Arc<dyn Backend> = match cfg.backend.kind {
        BackendKind::Mock => Arc::new(DeterministicBackend::new()),
        BackendKind::Openai => Arc::new(OpenAiBackend::from_env(cfg.backend.base_url.clone())?),
    };
    let retry = RetryPolicy {
        max_attempts: cfg.backend.max_attempts,
        ..RetryPolicy::default()
    };
    let mut gw = Gateway::new(backend, cfg.price_table())
        .with_retry(retry)
        .with_concurrency(cfg.concurrency);
    if let Some(dir) = &cfg.cache_dir {
        gw = gw.with_cache(ResponseCache::new(cfg.resolve(dir)));
    }
    Ok(gw)
}

fn prompt_set(cfg: &RunConfig) -> Result<PromptSet, CliError> {
    Ok(match &cfg.prompts_dir {
        Some(dir) => PromptSet::with_overrides(&cfg.resolve(dir))?,
        None => PromptSet::default(),
    })
}

fn load_checked_corpus(cfg: &RunConfig, stage: &mut Stage) -> Result<Vec<DialogueExample>, CliError> {
    stage.input("corpus", &cfg.corpus, &cfg.corpus_path())?;
    let examples = load_corpus(&cfg.corpus_path())?;
    check_labels(&examples, cfg.label_space)?;
    Ok(examples)
}

/// Examples carrying system responses: the simulated corpus when present,
/// else the input corpus.
fn responded_examples(cfg: &RunConfig, stage: &mut Stage) -> Result<Vec<DialogueExample>, CliError> {
    let simulated = cfg.run_path().join("simulated.jsonl");
    if simulated.is_file() {
        stage.input("simulated", Path::new("simulated.jsonl"), &simulated)?;
        Ok(load_corpus(&simulated)?)
    } else {
        load_checked_corpus(cfg, stage)
    }
}

fn simulate(cfg: &RunConfig, stage: &mut Stage) -> Result<String, CliError> {
    stage.name = "simulate";
    let examples = load_checked_corpus(cfg, stage)?;
    let gateway = build_gateway(cfg)?;
    let prompts = prompt_set(cfg)?;
    let synth = synthesizer(cfg, &gateway, &prompts);
    let outcome = synth.simulate_corpus(&examples);
    stage.write_jsonl("simulated.jsonl", &outcome.examples)?;
    stage.skips(&outcome.skipped)?;
    stage.write_json("ledger_simulate.json", &gateway.ledger().snapshot())?;
    Ok(format!(
        "simulated {} of {} responses ({} skipped)\n",
        outcome.examples.len() - outcome.skipped.len(),
        outcome.examples.len(),
        outcome.skipped.len()
    ))
}

fn synthesizer<'g>(cfg: &RunConfig, gateway: &'g Gateway, prompts: &'g PromptSet) -> Synthesizer<'g> {
    Synthesizer {
        gateway,
        prompts,
        simulator_model: cfg.models.simulator.clone(),
        rewriter_model: cfg.models.rewriter.clone(),
        config: cfg.synthesis.clone(),
        space: cfg.label_space,
    }
}

fn synthesize(cfg: &RunConfig, stage: &mut Stage) -> Result<String, CliError> {
    stage.name = "synthesize";
    let examples = responded_examples(cfg, stage)?;
    let gateway = build_gateway(cfg)?;
    let prompts = prompt_set(cfg)?;
    let outcome = synthesizer(cfg, &gateway, &prompts).synthesize(&examples)?;
    stage.write_jsonl("synthetic.jsonl", &outcome.records)?;
    stage.skips(&outcome.skipped)?;
    let ledger = gateway.ledger().snapshot();
    stage.write_json("ledger_synthesize.json", &ledger)?;
    Ok(format!(
        "wrote {} synthetic records ({} skipped), cost ${:.6}\n",
        outcome.records.len(),
        outcome.skipped.len(),
        ledger.total_cost_usd()
    ))
}

fn train_file(ablation: Ablation) -> String {
    match ablation {
        Ablation::None => "train.jsonl".into(),
        other => format!("train_{}.jsonl", other.as_str()),
    }
}

fn assemble(cfg: &RunConfig, stage: &mut Stage, ablation: Ablation) -> Result<String, CliError> {
    stage.name = "assemble";
    let examples = responded_examples(cfg, stage)?;
    let synthetic = cfg.run_path().join("synthetic.jsonl");
    stage.input("synthetic", Path::new("synthetic.jsonl"), &synthetic)?;
    let records: Vec<SyntheticRecord> = read_jsonl(&synthetic)?;
    let set = assemble_training_set(&records, &examples, ablation, cfg.label_space)?;
    let file = train_file(ablation);
    stage.write_jsonl(&file, &set.rows)?;
    Ok(format!(
        "wrote {} training rows to {file} ({} before dedup)\n",
        set.rows.len(),
        set.rows_before_dedup
    ))
}

type BuiltDetector = (Box<dyn Detector>, Option<Arc<Gateway>>);

fn build_detector(cfg: &RunConfig, clock: LatencyClock) -> Result<BuiltDetector, CliError> {
    let d = cfg
        .detector
        .as_ref()
        .ok_or_else(|| CliError::Usage("evaluate needs a [detector] section".into()))?;
    Ok(match d.kind {
        DetectorChoice::RandomBaseline => (
            Box::new(RandomBaseline {
                seed: cfg.seed,
                clock,
            }),
            None,
        ),
        DetectorChoice::RemoteClassifier => {
            let mut rc = RemoteClassifier::new(d.endpoint.clone().unwrap_or_default());
            rc.clock = clock;
            (Box::new(rc), None)
        }
        DetectorChoice::JudgePlusminus | DetectorChoice::JudgeInternal => {
            let gw = Arc::new(build_gateway(cfg)?);
            let style = if d.kind == DetectorChoice::JudgePlusminus {
                JudgeStyle::Plusminus
            } else {
                JudgeStyle::Internal
            };
            let mut judge = JudgeDetector::new(gw.clone(), cfg.models.judge.clone(), style);
            judge.prompts = Arc::new(prompt_set(cfg)?);
            judge.fallback = d.fallback;
            judge.clock = clock;
            (Box::new(judge), Some(gw))
        }
    })
}

fn evaluate_cmd(cfg: &RunConfig, stage: &mut Stage, collapse: bool) -> Result<String, CliError> {
    stage.name = "evaluate";
    let (shown, path) = match &cfg.evaluation.testset {
        Some(p) => (p.clone(), cfg.resolve(p)),
        None => (PathBuf::from("train.jsonl"), cfg.run_path().join("train.jsonl")),
    };
    stage.input("testset", &shown, &path)?;
    let mut testset = load_corpus(&path)?;
    if cfg.evaluation.split != SplitChoice::All {
        let splits = assign_splits(&testset)?;
        let keep: std::collections::HashSet<String> = match cfg.evaluation.split {
            SplitChoice::Test => splits.test.into_iter().collect(),
            _ => splits.dev.into_iter().collect(),
        };
        testset.retain(|e| keep.contains(&e.id));
    }
    let clock = match cfg.evaluation.clock {
        ClockKind::Wall => LatencyClock::Wall,
        ClockKind::Fixed => LatencyClock::Fixed(cfg.evaluation.fixed_latency_ms),
    };
    let (detector, gateway) = build_detector(cfg, clock)?;
    let mut opts = EvalOptions::new(cfg.label_space).collapse(collapse);
    opts.detector_space = cfg.evaluation.detector_space;
    let report = evaluate(detector.as_ref(), &testset, opts)?;
    let stem = if collapse { "metrics_collapsed" } else { "metrics" };
    stage.write_json(&format!("{stem}.json"), &report)?;
    let text = report.to_text();
    stage.write(&format!("{stem}.txt"), text.as_bytes())?;
    if let Some(gw) = gateway {
        stage.write_json("ledger_evaluate.json", &gw.ledger().snapshot())?;
    }
    Ok(text)
}

fn load_distribution(path: &Path) -> Result<PatternDistribution, CliError> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        Ok(distribution_from_annotations(&load_annotations(path)?)?)
    } else {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        serde_json::from_slice(&bytes).map_err(|e| {
            CliError::Usage(format!("{}: not a pattern distribution: {e}", path.display()))
        })
    }
}

fn analyze_patterns(cfg: &RunConfig, stage: &mut Stage) -> Result<String, CliError> {
    stage.name = "analyze_patterns";
    let p = &cfg.patterns;
    if p.inputs.is_empty() {
        return Err(CliError::Usage("no [patterns.inputs] configured".into()));
    }
    let reference = p
        .reference
        .clone()
        .ok_or_else(|| CliError::Usage("no pattern reference given".into()))?;
    let mut names: Vec<&String> = p.order.iter().collect();
    names.extend(p.inputs.keys().filter(|k| !p.order.contains(k)));
    let mut dists = Vec::new();
    for name in names {
        let shown = &p.inputs[name];
        let path = cfg.resolve(shown);
        stage.input(&format!("patterns.{name}"), shown, &path)?;
        dists.push((name.clone(), load_distribution(&path)?));
    }
    let report = export_pattern_report(&dists, &reference)?;
    stage.write("patterns.csv", report.csv.as_bytes())?;
    stage.write_json("patterns.json", &report.summary)?;
    let mut out = report.csv.clone();
    for (name, kl) in &report.summary.kl_to_reference {
        let _ = writeln!(out, "KL({name} || {reference}) = {kl:.4}");
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub stages: BTreeMap<String, LedgerSnapshot>,
    pub total: LedgerSnapshot,
    pub total_cost_usd: f64,
    pub synthetic_records: usize,
    pub mean_cost_per_record_usd: Option<f64>,
}

fn report_cost(cfg: &RunConfig, stage: &mut Stage) -> Result<String, CliError> {
    stage.name = "report_cost";
    let dir = cfg.run_path();
    let mut stages = BTreeMap::new();
    for name in ["simulate", "synthesize", "evaluate"] {
        let path = dir.join(format!("ledger_{name}.json"));
        if path.is_file() {
            let bytes = stage.input(&format!("ledger_{name}"), Path::new(&format!("ledger_{name}.json")), &path)?;
            let snap: LedgerSnapshot = serde_json::from_slice(&bytes)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            stages.insert(name.to_string(), snap);
        }
    }
    let mut total = LedgerSnapshot::default();
    for snap in stages.values() {
        total.merge(snap);
    }
    let synthetic = dir.join("synthetic.jsonl");
    let records: Vec<SyntheticRecord> = if synthetic.is_file() {
        read_jsonl(&synthetic)?
    } else {
        Vec::new()
    };
    let synth_cost = stages.get("synthesize").map_or(0.0, LedgerSnapshot::total_cost_usd);
    let report = CostReport {
        total_cost_usd: total.total_cost_usd(),
        total,
        synthetic_records: records.len(),
        mean_cost_per_record_usd: (!records.is_empty()).then(|| synth_cost / records.len() as f64),
        stages,
    };
    stage.write_json("cost.json", &report)?;

    let mut out = String::new();
    let _ = writeln!(out, "{:<12} {:<28} {:>9} {:>12} {:>12} {:>12}", "stage", "model", "requests", "prompt_tok", "compl_tok", "cost_usd");
    for (name, snap) in &report.stages {
        for (model, u) in &snap.models {
            let _ = writeln!(
                out,
                "{name:<12} {model:<28} {:>9} {:>12} {:>12} {:>12.6}",
                u.requests, u.prompt_tokens, u.completion_tokens, u.cost_usd
            );
        }
    }
    let _ = writeln!(out, "total cost: ${:.6}", report.total_cost_usd);
    if let Some(mean) = report.mean_cost_per_record_usd {
        let _ = writeln!(
            out,
            "mean cost per synthetic record: ${mean:.6} over {} records",
            report.synthetic_records
        );
    }
    Ok(out)
}
