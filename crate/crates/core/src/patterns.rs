//! Hallucination-pattern taxonomy and distribution comparison.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jsonl::{read_jsonl, JsonlError};

#[derive(Debug, Error)]
pub enum PatternError {
    #[error("no annotations")]
    Empty,
    #[error("distribution has no mass")]
    ZeroMass,
    #[error("probability for {category} is {value}; must be finite and non-negative")]
    BadProbability { category: PatternCategory, value: f64 },
    #[error("reference distribution {0:?} not among inputs")]
    UnknownReference(String),
    #[error("duplicate distribution name {0:?}")]
    DuplicateName(String),
    #[error("unknown pattern category {0:?}")]
    UnknownCategory(String),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternCategory {
    AddAttribute,
    AddOrUpdateRelation,
    AddNewEntity,
    Overclaim,
    InferenceError,
    NoneOfAbove,
}

impl PatternCategory {
    pub const ALL: [PatternCategory; 6] = [
        PatternCategory::AddAttribute,
        PatternCategory::AddOrUpdateRelation,
        PatternCategory::AddNewEntity,
        PatternCategory::Overclaim,
        PatternCategory::InferenceError,
        PatternCategory::NoneOfAbove,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PatternCategory::AddAttribute => "add_attribute",
            PatternCategory::AddOrUpdateRelation => "add_or_update_relation",
            PatternCategory::AddNewEntity => "add_new_entity",
            PatternCategory::Overclaim => "overclaim",
            PatternCategory::InferenceError => "inference_error",
            PatternCategory::NoneOfAbove => "none_of_above",
        }
    }
}

impl fmt::Display for PatternCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PatternCategory {
    type Err = PatternError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| PatternError::UnknownCategory(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternAnnotation {
    pub record_id: String,
    pub category: PatternCategory,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotator: Option<String>,
}

pub fn load_annotations(path: &Path) -> Result<Vec<PatternAnnotation>, PatternError> {
    Ok(read_jsonl(path)?)
}

/// Probabilities over all six categories, normalized to sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<PatternCategory, f64>", into = "BTreeMap<PatternCategory, f64>")]
pub struct PatternDistribution {
    probs: [f64; 6],
}

impl PatternDistribution {
    /// Normalizes non-negative weights given in category order.
    pub fn from_weights(weights: [f64; 6]) -> Result<Self, PatternError> {
        for (c, &w) in PatternCategory::ALL.iter().zip(&weights) {
            if !w.is_finite() || w < 0.0 {
                return Err(PatternError::BadProbability {
                    category: *c,
                    value: w,
                });
            }
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(PatternError::ZeroMass);
        }
        Ok(PatternDistribution {
            probs: weights.map(|w| w / total),
        })
    }

    pub fn get(&self, category: PatternCategory) -> f64 {
        self.probs[category as usize]
    }

    pub fn probs(&self) -> [f64; 6] {
        self.probs
    }
}

impl TryFrom<BTreeMap<PatternCategory, f64>> for PatternDistribution {
    type Error = PatternError;

    fn try_from(map: BTreeMap<PatternCategory, f64>) -> Result<Self, Self::Error> {
        let mut w = [0.0; 6];
        for (c, p) in map {
            w[c as usize] = p;
        }
        Self::from_weights(w)
    }
}

impl From<PatternDistribution> for BTreeMap<PatternCategory, f64> {
    fn from(d: PatternDistribution) -> Self {
        PatternCategory::ALL.into_iter().zip(d.probs).collect()
    }
}

pub fn distribution_from_annotations(
    anns: &[PatternAnnotation],
) -> Result<PatternDistribution, PatternError> {
    if anns.is_empty() {
        return Err(PatternError::Empty);
    }
    let mut counts = [0.0; 6];
    for a in anns {
        counts[a.category as usize] += 1.0;
    }
    PatternDistribution::from_weights(counts)
}

fn smooth(p: &PatternDistribution, eps: f64) -> [f64; 6] {
    let total: f64 = p.probs.iter().map(|x| x + eps).sum();
    p.probs.map(|x| (x + eps) / total)
}

/// KL(p‖q) in nats after adding `epsilon` to every cell and renormalizing.
pub fn kl_divergence(p: &PatternDistribution, q: &PatternDistribution, epsilon: f64) -> f64 {
    let (p, q) = (smooth(p, epsilon), smooth(q, epsilon));
    let kl: f64 = p
        .iter()
        .zip(&q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum();
    kl.max(0.0)
}

pub const DEFAULT_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternSummary {
    pub reference: String,
    pub epsilon: f64,
    pub distributions: BTreeMap<String, PatternDistribution>,
    /// KL(name‖reference) for every distribution but the reference. A lone
    /// distribution is compared with itself.
    pub kl_to_reference: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatternReport {
    pub csv: String,
    pub summary: PatternSummary,
}

/// Builds plot-ready CSV (one row per category, one column per input in the
/// given order) and a JSON-able summary with KL against `reference`.
pub fn export_pattern_report(
    dists: &[(String, PatternDistribution)],
    reference: &str,
) -> Result<PatternReport, PatternError> {
    let mut by_name = BTreeMap::new();
    for (name, d) in dists {
        if by_name.insert(name.clone(), d.clone()).is_some() {
            return Err(PatternError::DuplicateName(name.clone()));
        }
    }
    let refd = by_name
        .get(reference)
        .ok_or_else(|| PatternError::UnknownReference(reference.to_string()))?;
    let kl_to_reference = dists
        .iter()
        .filter(|(name, _)| name != reference || dists.len() == 1)
        .map(|(name, d)| (name.clone(), kl_divergence(d, refd, DEFAULT_EPSILON)))
        .collect();

    let mut csv = String::from("category");
    for (name, _) in dists {
        csv.push(',');
        csv.push_str(&csv_field(name));
    }
    csv.push('\n');
    for c in PatternCategory::ALL {
        csv.push_str(c.as_str());
        for (_, d) in dists {
            csv.push_str(&format!(",{}", d.get(c)));
        }
        csv.push('\n');
    }
    Ok(PatternReport {
        csv,
        summary: PatternSummary {
            reference: reference.to_string(),
            epsilon: DEFAULT_EPSILON,
            distributions: by_name,
            kl_to_reference,
        },
    })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn d(w: [f64; 6]) -> PatternDistribution {
        PatternDistribution::from_weights(w).unwrap()
    }

    fn ann(i: usize, c: PatternCategory) -> PatternAnnotation {
        PatternAnnotation {
            record_id: format!("r{i}"),
            category: c,
            annotator: None,
        }
    }

    #[test]
    fn frequencies() {
        let mut anns: Vec<_> = (0..76).map(|i| ann(i, PatternCategory::AddAttribute)).collect();
        anns.extend((76..144).map(|i| ann(i, PatternCategory::NoneOfAbove)));
        let dist = distribution_from_annotations(&anns).unwrap();
        assert!((dist.get(PatternCategory::AddAttribute) - 76.0 / 144.0).abs() < 1e-15);
        assert_eq!(dist.get(PatternCategory::Overclaim), 0.0);
        let one = distribution_from_annotations(&[ann(0, PatternCategory::Overclaim)]).unwrap();
        assert_eq!(one.get(PatternCategory::Overclaim), 1.0);
        assert!(matches!(distribution_from_annotations(&[]), Err(PatternError::Empty)));
    }

    #[test]
    fn kl_identity_and_zero_cells() {
        let p = d([0.5, 0.5, 0.0, 0.0, 0.0, 0.0]);
        assert!(kl_divergence(&p, &p, DEFAULT_EPSILON).abs() < 1e-15);
        let q = d([0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let kl = kl_divergence(&p, &q, DEFAULT_EPSILON);
        assert!(kl.is_finite() && kl > 10.0);
    }

    #[test]
    fn report_shape() {
        let sys = d([0.54, 0.07, 0.05, 0.027, 0.004, 0.31]);
        let ours = d([0.53, 0.22, 0.16, 0.025, 0.01, 0.05]);
        let r = export_pattern_report(
            &[("System".into(), sys.clone()), ("Ours".into(), ours)],
            "System",
        )
        .unwrap();
        let lines: Vec<&str> = r.csv.lines().collect();
        assert_eq!(lines.len(), 7);
        assert_eq!(lines[0], "category,System,Ours");
        assert!(lines[6].starts_with("none_of_above,"));
        assert_eq!(r.summary.kl_to_reference.len(), 1);
        assert!(r.summary.kl_to_reference.contains_key("Ours"));

        let alone = export_pattern_report(&[("System".into(), sys.clone())], "System").unwrap();
        assert_eq!(alone.summary.kl_to_reference["System"], 0.0);
        assert!(matches!(
            export_pattern_report(&[("System".into(), sys)], "Missing"),
            Err(PatternError::UnknownReference(_))
        ));
    }

    #[test]
    fn distribution_json_round_trip() {
        let p = d([1.0, 1.0, 2.0, 0.0, 0.0, 0.0]);
        let s = serde_json::to_string(&p).unwrap();
        assert!(s.contains("\"add_new_entity\":0.5"));
        let back: PatternDistribution = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
        assert!(serde_json::from_str::<PatternDistribution>(r#"{"overclaim": -1}"#).is_err());
        assert!(serde_json::from_str::<PatternDistribution>(r#"{"made_up": 1}"#).is_err());
    }

    fn weights() -> impl Strategy<Value = [f64; 6]> {
        prop::array::uniform6(0.0f64..10.0).prop_filter("mass", |w| w.iter().sum::<f64>() > 1e-6)
    }

    fn dense() -> impl Strategy<Value = [f64; 6]> {
        prop::array::uniform6(1.0f64..10.0)
    }

    proptest! {
        #[test]
        fn kl_is_non_negative(p in weights(), q in weights()) {
            prop_assert!(kl_divergence(&d(p), &d(q), DEFAULT_EPSILON) >= 0.0);
        }

        #[test]
        fn normalized_sums_to_one(p in weights()) {
            prop_assert!((d(p).probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn dense_kl_ignores_epsilon(p in dense(), q in dense()) {
            let (p, q) = (d(p), d(q));
            // every cell is at least 1/60 > 1e-3
            let base = kl_divergence(&p, &q, 1e-9);
            for eps in [1e-6, 1e-12] {
                prop_assert!((kl_divergence(&p, &q, eps) - base).abs() < 1e-4);
            }
        }

        #[test]
        fn annotation_order_is_irrelevant(
            cats in prop::collection::vec(0usize..6, 1..60),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let anns: Vec<_> = cats.iter().enumerate()
                .map(|(i, &c)| ann(i, PatternCategory::ALL[c]))
                .collect();
            let mut shuffled = anns.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(
                distribution_from_annotations(&anns).unwrap(),
                distribution_from_annotations(&shuffled).unwrap()
            );
        }
    }
}
