//! Python bindings. Structured values cross the boundary as plain dicts and
//! lists with the same field names as the JSONL formats.

use std::collections::BTreeMap;
use std::path::PathBuf;

use haloforge::corpus::{self, DialogueExample, KnowledgeSource, Label, LabelSpace};
use haloforge::detection::{self, JudgeScheme};
use haloforge::evaluation::{self, MetricsReport};
use haloforge::gateway::{self, ModelPrice, PriceTable};
use haloforge::patterns::{self, PatternAnnotation, PatternCategory, PatternDistribution};
use haloforge::prompts::{self, PromptKind, TemplateContext};
use haloforge::synthesis;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(value_err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let json = obj.py().import("json")?;
    let text: String = json.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(value_err)
}

fn label(s: &str) -> PyResult<Label> {
    s.parse().map_err(value_err)
}

fn labels(xs: &[String]) -> PyResult<Vec<Label>> {
    xs.iter().map(|s| label(s)).collect()
}

fn space(s: &str) -> PyResult<LabelSpace> {
    s.parse().map_err(value_err)
}

fn parse_scheme(s: &str) -> PyResult<JudgeScheme> {
    match s {
        "plusminus" => Ok(JudgeScheme::Plusminus),
        "internal_binary" => Ok(JudgeScheme::InternalBinary),
        "internal_ternary" => Ok(JudgeScheme::InternalTernary),
        other => Err(value_err(format!("unknown judge scheme {other:?}"))),
    }
}

fn category(s: &str) -> PyResult<PatternCategory> {
    s.parse().map_err(value_err)
}

/// Reads and validates a dialogue corpus; returns a list of dicts.
#[pyfunction]
fn load_corpus(py: Python<'_>, path: PathBuf) -> PyResult<Py<PyAny>> {
    let examples = corpus::load_corpus(&path).map_err(|e| match e {
        corpus::CorpusError::Jsonl(haloforge::jsonl::JsonlError::Io { .. }) => PyIOError::new_err(e.to_string()),
        other => value_err(other),
    })?;
    to_py(py, &examples)
}

/// Writes a list of example dicts as JSONL.
#[pyfunction]
fn write_corpus(path: PathBuf, examples: &Bound<'_, PyAny>) -> PyResult<()> {
    let examples: Vec<DialogueExample> = from_py(examples)?;
    corpus::write_corpus(&path, &examples).map_err(value_err)
}

/// Returns `{"test": [...ids], "dev": [...ids]}`.
#[pyfunction]
fn assign_splits(py: Python<'_>, examples: &Bound<'_, PyAny>) -> PyResult<Py<PyAny>> {
    let examples: Vec<DialogueExample> = from_py(examples)?;
    let split = corpus::assign_splits(&examples).map_err(value_err)?;
    let out = BTreeMap::from([("test", split.test), ("dev", split.dev)]);
    to_py(py, &out)
}

#[pyfunction]
fn render_knowledge(knowledge: &Bound<'_, PyAny>) -> PyResult<String> {
    let ks: KnowledgeSource = from_py(knowledge)?;
    Ok(corpus::render_knowledge(&ks))
}

#[pyfunction]
fn render_history(history: &Bound<'_, PyAny>) -> PyResult<String> {
    let turns: Vec<corpus::Turn> = from_py(history)?;
    Ok(corpus::render_history(&turns))
}

#[pyfunction]
fn prompt_kinds() -> Vec<&'static str> {
    PromptKind::ALL.iter().map(|k| k.as_str()).collect()
}

/// Renders a stock template with already-rendered knowledge and history text.
#[pyfunction]
#[pyo3(signature = (kind, knowledge, history, response=None))]
fn render_prompt(
    kind: &str,
    knowledge: &str,
    history: &str,
    response: Option<&str>,
) -> PyResult<String> {
    let kind: PromptKind = kind.parse().map_err(value_err)?;
    let mut ctx = TemplateContext::new(knowledge, history);
    if let Some(r) = response {
        ctx = ctx.with_response(r);
    }
    prompts::render_prompt(kind, &ctx).map_err(value_err)
}

#[pyfunction]
fn parse_rewrite(raw: &str) -> PyResult<String> {
    synthesis::parse_rewrite(raw).map_err(value_err)
}

/// `scheme` is one of "plusminus", "internal_binary", "internal_ternary".
#[pyfunction]
fn parse_judge_answer(text: &str, scheme: &str) -> PyResult<&'static str> {
    detection::parse_judge_answer(text, parse_scheme(scheme)?)
        .map(Label::as_str)
        .map_err(value_err)
}

#[pyfunction]
fn collapse_label(name: &str) -> PyResult<&'static str> {
    detection::collapse_label(label(name)?)
        .map(Label::as_str)
        .map_err(value_err)
}

/// Row-major counts, rows gold and columns predicted, in label-space order.
#[pyfunction]
fn confusion(golds: Vec<String>, preds: Vec<String>, label_space: &str) -> PyResult<Vec<Vec<u64>>> {
    let sp = space(label_space)?;
    let cm = evaluation::confusion(&labels(&golds)?, &labels(&preds)?, sp).map_err(value_err)?;
    Ok(sp
        .labels()
        .iter()
        .map(|&g| sp.labels().iter().map(|&p| cm.get(g, p)).collect())
        .collect())
}

/// Returns `(macro_f1, {label: {precision, recall, f1, support}})`.
#[pyfunction]
fn macro_f1(
    py: Python<'_>,
    golds: Vec<String>,
    preds: Vec<String>,
    label_space: &str,
) -> PyResult<(f64, Py<PyAny>)> {
    let cm = evaluation::confusion(&labels(&golds)?, &labels(&preds)?, space(label_space)?)
        .map_err(value_err)?;
    let (per_class, m) = evaluation::macro_f1(&cm);
    Ok((m, to_py(py, &per_class)?))
}

/// Full metrics report as a dict, the same shape as metrics.json.
#[pyfunction]
#[pyo3(signature = (golds, preds, label_space, latencies_ms=Vec::new(), collapse=false))]
fn metrics_report(
    py: Python<'_>,
    golds: Vec<String>,
    preds: Vec<String>,
    label_space: &str,
    latencies_ms: Vec<f64>,
    collapse: bool,
) -> PyResult<Py<PyAny>> {
    let mut sp = space(label_space)?;
    let mut golds = labels(&golds)?;
    let mut preds = labels(&preds)?;
    if collapse {
        let c = |v: Vec<Label>| -> PyResult<Vec<Label>> {
            v.into_iter()
                .map(|l| if LabelSpace::Ternary.contains(l) { detection::collapse_label(l) } else { Ok(l) })
                .collect::<Result<_, _>>()
                .map_err(value_err)
        };
        golds = c(golds)?;
        preds = c(preds)?;
        sp = LabelSpace::Binary;
    }
    let report = MetricsReport::from_labels(&golds, &preds, sp, &latencies_ms, 0, collapse)
        .map_err(value_err)?;
    to_py(py, &report)
}

#[pyfunction]
fn cohen_kappa(a: Vec<String>, b: Vec<String>) -> PyResult<f64> {
    evaluation::cohen_kappa(&labels(&a)?, &labels(&b)?).map_err(value_err)
}

#[pyfunction]
fn pattern_categories() -> Vec<&'static str> {
    PatternCategory::ALL.iter().map(|c| c.as_str()).collect()
}

fn distribution(d: BTreeMap<String, f64>) -> PyResult<PatternDistribution> {
    let mut w = [0.0; 6];
    for (k, v) in d {
        w[category(&k)? as usize] = v;
    }
    PatternDistribution::from_weights(w).map_err(value_err)
}

/// KL(p‖q) in nats over the six pattern categories. Missing keys count as 0.
#[pyfunction]
#[pyo3(signature = (p, q, epsilon=patterns::DEFAULT_EPSILON))]
fn kl_divergence(p: BTreeMap<String, f64>, q: BTreeMap<String, f64>, epsilon: f64) -> PyResult<f64> {
    Ok(patterns::kl_divergence(&distribution(p)?, &distribution(q)?, epsilon))
}

/// Normalized category frequencies from a list of category names.
#[pyfunction]
fn distribution_from_annotations(categories: Vec<String>) -> PyResult<BTreeMap<&'static str, f64>> {
    let anns = categories
        .iter()
        .enumerate()
        .map(|(i, c)| {
            Ok(PatternAnnotation {
                record_id: i.to_string(),
                category: category(c)?,
                annotator: None,
            })
        })
        .collect::<PyResult<Vec<_>>>()?;
    let d = patterns::distribution_from_annotations(&anns).map_err(value_err)?;
    Ok(PatternCategory::ALL.iter().map(|&c| (c.as_str(), d.get(c))).collect())
}

/// USD cost of one call given per-1k-token prices.
#[pyfunction]
fn cost_of(
    prompt_tokens: u64,
    completion_tokens: u64,
    usd_per_1k_prompt: f64,
    usd_per_1k_completion: f64,
) -> PyResult<f64> {
    let table = PriceTable::from_iter([("m", ModelPrice::new(usd_per_1k_prompt, usd_per_1k_completion))]);
    gateway::cost_of(prompt_tokens, completion_tokens, "m", &table).map_err(value_err)
}

#[pymodule]
fn haloforge_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("LABELS", Label::ALL.iter().map(|l| l.as_str()).collect::<Vec<_>>())?;
    m.add_function(wrap_pyfunction!(load_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(write_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(assign_splits, m)?)?;
    m.add_function(wrap_pyfunction!(render_knowledge, m)?)?;
    m.add_function(wrap_pyfunction!(render_history, m)?)?;
    m.add_function(wrap_pyfunction!(prompt_kinds, m)?)?;
    m.add_function(wrap_pyfunction!(render_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(parse_rewrite, m)?)?;
    m.add_function(wrap_pyfunction!(parse_judge_answer, m)?)?;
    m.add_function(wrap_pyfunction!(collapse_label, m)?)?;
    m.add_function(wrap_pyfunction!(confusion, m)?)?;
    m.add_function(wrap_pyfunction!(macro_f1, m)?)?;
    m.add_function(wrap_pyfunction!(metrics_report, m)?)?;
    m.add_function(wrap_pyfunction!(cohen_kappa, m)?)?;
    m.add_function(wrap_pyfunction!(pattern_categories, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(distribution_from_annotations, m)?)?;
    m.add_function(wrap_pyfunction!(cost_of, m)?)?;
    Ok(())
}
