use std::collections::BTreeMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{ChatResponse, GatewayError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelPrice {
    pub usd_per_1k_prompt_tokens: f64,
    pub usd_per_1k_completion_tokens: f64,
}

impl ModelPrice {
    pub fn new(prompt: f64, completion: f64) -> Self {
        ModelPrice {
            usd_per_1k_prompt_tokens: prompt,
            usd_per_1k_completion_tokens: completion,
        }
    }
}

/// Per-model token prices. Looking up an unlisted model is an error.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PriceTable {
    models: BTreeMap<String, ModelPrice>,
}

impl PriceTable {
    pub fn insert(&mut self, model: impl Into<String>, price: ModelPrice) {
        self.models.insert(model.into(), price);
    }

    pub fn get(&self, model: &str) -> Result<&ModelPrice, GatewayError> {
        self.models
            .get(model)
            .ok_or_else(|| GatewayError::UnknownModel(model.to_string()))
    }

    pub fn validate(&self) -> Result<(), String> {
        for (model, p) in &self.models {
            let ok = |v: f64| v.is_finite() && v >= 0.0;
            if !ok(p.usd_per_1k_prompt_tokens) || !ok(p.usd_per_1k_completion_tokens) {
                return Err(format!("price for {model:?} must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

impl<S: Into<String>> FromIterator<(S, ModelPrice)> for PriceTable {
    fn from_iter<I: IntoIterator<Item = (S, ModelPrice)>>(iter: I) -> Self {
        PriceTable {
            models: iter.into_iter().map(|(k, v)| (k.into(), v)).collect(),
        }
    }
}

pub fn cost_of(
    prompt_tokens: u64,
    completion_tokens: u64,
    model: &str,
    prices: &PriceTable,
) -> Result<f64, GatewayError> {
    let p = prices.get(model)?;
    Ok(prompt_tokens as f64 / 1000.0 * p.usd_per_1k_prompt_tokens
        + completion_tokens as f64 / 1000.0 * p.usd_per_1k_completion_tokens)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub requests: u64,
    pub cost_usd: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub models: BTreeMap<String, ModelUsage>,
}

impl LedgerSnapshot {
    pub fn total_cost_usd(&self) -> f64 {
        self.models.values().map(|u| u.cost_usd).sum()
    }

    pub fn total_requests(&self) -> u64 {
        self.models.values().map(|u| u.requests).sum()
    }

    pub fn merge(&mut self, other: &LedgerSnapshot) {
        for (model, u) in &other.models {
            let mine = self.models.entry(model.clone()).or_default();
            mine.prompt_tokens += u.prompt_tokens;
            mine.completion_tokens += u.completion_tokens;
            mine.requests += u.requests;
            mine.cost_usd += u.cost_usd;
        }
    }
}

/// Thread-safe accumulator of usage per model.
///
/// Costs are summed as integer attodollars so the total does not depend on
/// the order concurrent requests finish in.
#[derive(Debug, Default)]
pub struct UsageLedger {
    inner: Mutex<BTreeMap<String, Tally>>,
}

#[derive(Debug, Default, Clone, Copy)]
struct Tally {
    prompt_tokens: u64,
    completion_tokens: u64,
    requests: u64,
    cost_atto: i128,
}

const ATTO: f64 = 1e18;

impl UsageLedger {
    pub fn record(&self, model: &str, resp: &ChatResponse, cost_usd: f64) {
        let mut inner = self.inner.lock().unwrap();
        let t = inner.entry(model.to_string()).or_default();
        t.prompt_tokens += resp.prompt_tokens;
        t.completion_tokens += resp.completion_tokens;
        t.requests += 1;
        t.cost_atto += (cost_usd * ATTO).round() as i128;
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        let inner = self.inner.lock().unwrap();
        LedgerSnapshot {
            models: inner
                .iter()
                .map(|(m, t)| {
                    let usage = ModelUsage {
                        prompt_tokens: t.prompt_tokens,
                        completion_tokens: t.completion_tokens,
                        requests: t.requests,
                        cost_usd: t.cost_atto as f64 / ATTO,
                    };
                    (m.clone(), usage)
                })
                .collect(),
        }
    }
}
