//! Classification metrics, latency statistics and annotator agreement.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{DialogueExample, Label, LabelSpace};
use crate::detection::{collapse_label, DetectionError, Detector};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {0} gold labels vs {1} predictions")]
    LengthMismatch(usize, usize),
    #[error("label {label} is not in the {space} label space")]
    ForeignLabel { label: Label, space: LabelSpace },
    #[error("no labels to compare")]
    Empty,
    #[error("example {0:?} has no gold label")]
    MissingGold(String),
    #[error("collapsing requires ternary gold labels")]
    CollapseNeedsTernary,
    #[error("example {id:?}: {source}")]
    Detection {
        id: String,
        #[source]
        source: DetectionError,
    },
}

/// Counts indexed `[gold][pred]` by position in the label space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    space: LabelSpace,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn empty(space: LabelSpace) -> Self {
        let n = space.labels().len();
        ConfusionMatrix {
            space,
            counts: vec![vec![0; n]; n],
        }
    }

    pub fn space(&self) -> LabelSpace {
        self.space
    }

    pub fn get(&self, gold: Label, pred: Label) -> u64 {
        match (self.space.index_of(gold), self.space.index_of(pred)) {
            (Some(g), Some(p)) => self.counts[g][p],
            _ => 0,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn add(&mut self, gold: Label, pred: Label) -> Result<(), EvalError> {
        let idx = |label| {
            self.space.index_of(label).ok_or(EvalError::ForeignLabel {
                label,
                space: self.space,
            })
        };
        let (g, p) = (idx(gold)?, idx(pred)?);
        self.counts[g][p] += 1;
        Ok(())
    }

    pub fn correct(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }
}

pub fn confusion(
    golds: &[Label],
    preds: &[Label],
    space: LabelSpace,
) -> Result<ConfusionMatrix, EvalError> {
    if golds.len() != preds.len() {
        return Err(EvalError::LengthMismatch(golds.len(), preds.len()));
    }
    let mut cm = ConfusionMatrix::empty(space);
    for (&g, &p) in golds.iter().zip(preds) {
        cm.add(g, p)?;
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Per-class precision/recall/F1 and their unweighted mean F1 over every
/// label in the space. Any 0/0 is taken as 0.
pub fn macro_f1(cm: &ConfusionMatrix) -> (BTreeMap<Label, ClassMetrics>, f64) {
    let n = cm.counts.len();
    let mut per_class = BTreeMap::new();
    for (k, &label) in cm.space.labels().iter().enumerate() {
        let tp = cm.counts[k][k] as f64;
        let predicted: u64 = (0..n).map(|g| cm.counts[g][k]).sum();
        let actual: u64 = cm.counts[k].iter().sum();
        let precision = ratio(tp, predicted as f64);
        let recall = ratio(tp, actual as f64);
        let f1 = ratio(2.0 * precision * recall, precision + recall);
        per_class.insert(
            label,
            ClassMetrics {
                precision,
                recall,
                f1,
                support: actual,
            },
        );
    }
    let macro_ = per_class.values().map(|m| m.f1).sum::<f64>() / n as f64;
    (per_class, macro_)
}

pub fn accuracy(cm: &ConfusionMatrix) -> f64 {
    ratio(cm.correct() as f64, cm.total() as f64)
}

/// Cohen's kappa between two annotators. When chance agreement is 1 the
/// result is 1 for perfect observed agreement and 0 otherwise.
pub fn cohen_kappa(a: &[Label], b: &[Label]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = a.len() as f64;
    let p_o = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / n;
    let labels: BTreeSet<Label> = a.iter().chain(b).copied().collect();
    let p_e: f64 = labels
        .iter()
        .map(|l| {
            let fa = a.iter().filter(|x| *x == l).count() as f64 / n;
            let fb = b.iter().filter(|x| *x == l).count() as f64 / n;
            fa * fb
        })
        .sum();
    if (1.0 - p_e).abs() < f64::EPSILON {
        return Ok(if (p_o - 1.0).abs() < f64::EPSILON { 1.0 } else { 0.0 });
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_s: f64,
    pub p50_s: f64,
    pub p95_s: f64,
}

/// Nearest-rank percentile of an ascending slice.
fn nearest_rank(sorted: &[f64], pct: f64) -> f64 {
    let rank = ((pct / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

pub fn latency_stats(latencies_ms: &[f64]) -> LatencyStats {
    if latencies_ms.is_empty() {
        return LatencyStats::default();
    }
    let mut s: Vec<f64> = latencies_ms.iter().map(|ms| ms / 1e3).collect();
    s.sort_by(f64::total_cmp);
    LatencyStats {
        mean_s: s.iter().sum::<f64>() / s.len() as f64,
        p50_s: nearest_rank(&s, 50.0),
        p95_s: nearest_rank(&s, 95.0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionCell {
    pub gold: Label,
    pub predicted: Label,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label_space: LabelSpace,
    pub collapsed: bool,
    pub examples: u64,
    pub confusion: Vec<ConfusionCell>,
    pub per_class: BTreeMap<Label, ClassMetrics>,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub latency_mean_s: f64,
    pub latency_p50_s: f64,
    pub latency_p95_s: f64,
    pub unparsed_count: u64,
}

impl MetricsReport {
    pub fn from_labels(
        golds: &[Label],
        preds: &[Label],
        space: LabelSpace,
        latencies_ms: &[f64],
        unparsed_count: u64,
        collapsed: bool,
    ) -> Result<Self, EvalError> {
        let cm = confusion(golds, preds, space)?;
        let (per_class, macro_f1) = macro_f1(&cm);
        let lat = latency_stats(latencies_ms);
        let confusion = space
            .labels()
            .iter()
            .flat_map(|&g| {
                let cm = &cm;
                space.labels().iter().map(move |&p| ConfusionCell {
                    gold: g,
                    predicted: p,
                    count: cm.get(g, p),
                })
            })
            .collect();
        Ok(MetricsReport {
            label_space: space,
            collapsed,
            examples: cm.total(),
            confusion,
            per_class,
            macro_f1,
            accuracy: accuracy(&cm),
            latency_mean_s: lat.mean_s,
            latency_p50_s: lat.p50_s,
            latency_p95_s: lat.p95_s,
            unparsed_count,
        })
    }

    /// Plain-text table; latencies in seconds to two decimals.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "label space: {}{}  examples: {}",
            self.label_space,
            if self.collapsed { " (collapsed)" } else { "" },
            self.examples
        );
        let _ = writeln!(
            out,
            "{:<24} {:>9} {:>9} {:>9} {:>8}",
            "class", "precision", "recall", "f1", "support"
        );
        for (label, m) in &self.per_class {
            let _ = writeln!(
                out,
                "{:<24} {:>9.3} {:>9.3} {:>9.3} {:>8}",
                label.as_str(),
                m.precision,
                m.recall,
                m.f1,
                m.support
            );
        }
        let _ = writeln!(out, "macro-F1: {:.3}", self.macro_f1);
        let _ = writeln!(out, "accuracy: {:.3}", self.accuracy);
        let _ = writeln!(
            out,
            "latency (s): mean {:.2}  p50 {:.2}  p95 {:.2}",
            self.latency_mean_s, self.latency_p50_s, self.latency_p95_s
        );
        let _ = writeln!(out, "unparsed answers: {}", self.unparsed_count);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    /// Space of the gold labels in the test set.
    pub space: LabelSpace,
    /// Space the detector is asked to classify in; defaults to `space`.
    pub detector_space: Option<LabelSpace>,
    /// Map ternary gold and predicted labels to binary before scoring.
    pub collapse: bool,
}

impl EvalOptions {
    pub fn new(space: LabelSpace) -> Self {
        EvalOptions {
            space,
            detector_space: None,
            collapse: false,
        }
    }

    pub fn collapse(mut self, on: bool) -> Self {
        self.collapse = on;
        self
    }

    pub fn detector_space(mut self, space: LabelSpace) -> Self {
        self.detector_space = Some(space);
        self
    }
}

fn collapse_if_ternary(label: Label) -> Result<Label, DetectionError> {
    if LabelSpace::Binary.contains(label) {
        Ok(label)
    } else {
        collapse_label(label)
    }
}

/// Classifies the test set one example at a time and scores the result.
pub fn evaluate(
    detector: &dyn Detector,
    testset: &[DialogueExample],
    opts: EvalOptions,
) -> Result<MetricsReport, EvalError> {
    if opts.collapse && opts.space != LabelSpace::Ternary {
        return Err(EvalError::CollapseNeedsTernary);
    }
    let detector_space = opts.detector_space.unwrap_or(opts.space);
    let mut golds = Vec::with_capacity(testset.len());
    let mut preds = Vec::with_capacity(testset.len());
    let mut latencies = Vec::with_capacity(testset.len());
    let mut unparsed = 0;
    for ex in testset {
        let gold = ex
            .gold_label
            .ok_or_else(|| EvalError::MissingGold(ex.id.clone()))?;
        if !opts.space.contains(gold) {
            return Err(EvalError::ForeignLabel {
                label: gold,
                space: opts.space,
            });
        }
        let verdict = detector
            .classify(ex, detector_space)
            .map_err(|source| EvalError::Detection {
                id: ex.id.clone(),
                source,
            })?;
        unparsed += u64::from(verdict.unparsed);
        latencies.push(verdict.latency_ms);
        golds.push(gold);
        preds.push(verdict.label);
    }
    let space = if opts.collapse {
        let wrap = |id: &str| {
            let id = id.to_string();
            move |source| EvalError::Detection { id, source }
        };
        for (i, ex) in testset.iter().enumerate() {
            golds[i] = collapse_label(golds[i]).map_err(wrap(&ex.id))?;
            preds[i] = collapse_if_ternary(preds[i]).map_err(wrap(&ex.id))?;
        }
        LabelSpace::Binary
    } else {
        opts.space
    };
    MetricsReport::from_labels(&golds, &preds, space, &latencies, unparsed, opts.collapse)
}
