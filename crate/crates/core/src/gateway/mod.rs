//! Chat-completion client layer: retries with exponential backoff, a bounded
//! number of in-flight requests, an optional on-disk response cache and a
//! usage/cost ledger.

mod cache;
pub mod mock;
mod openai;
mod pricing;

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{cache_key, ResponseCache};
pub use openai::{OpenAiBackend, API_KEY_ENV};
pub use pricing::{cost_of, LedgerSnapshot, ModelPrice, ModelUsage, PriceTable, UsageLedger};

pub const DEFAULT_CONCURRENCY: usize = 4;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("no price configured for model {0:?}")]
    UnknownModel(String),
    #[error("backend error: {0}")]
    Fatal(String),
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Distinguishes repeated draws made with otherwise identical settings.
    pub sample_index: u32,
}

impl ChatRequest {
    pub fn new(model: impl Into<String>, prompt: impl Into<String>) -> Self {
        ChatRequest {
            model: model.into(),
            prompt: prompt.into(),
            temperature: 0.0,
            max_tokens: 512,
            sample_index: 0,
        }
    }

    pub fn temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn max_tokens(mut self, n: u32) -> Self {
        self.max_tokens = n;
        self
    }

    pub fn sample_index(mut self, i: u32) -> Self {
        self.sample_index = i;
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.prompt.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("empty prompt".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl ChatResponse {
    pub fn new(text: impl Into<String>, prompt_tokens: u64, completion_tokens: u64) -> Self {
        ChatResponse {
            text: text.into(),
            prompt_tokens,
            completion_tokens,
        }
    }
}

/// Failure classes a backend reports. Only `Transient` is retried.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("transient: {0}")]
    Transient(String),
    #[error("{0}")]
    Fatal(String),
}

pub trait Backend: Send + Sync {
    fn send(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn send(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).send(req)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub factor: f64,
    pub jitter: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base_delay: Duration::from_secs(1),
            factor: 2.0,
            jitter: true,
        }
    }
}

impl RetryPolicy {
    /// No sleeping between attempts; for tests and mock runs.
    pub fn immediate() -> Self {
        RetryPolicy {
            base_delay: Duration::ZERO,
            jitter: false,
            ..RetryPolicy::default()
        }
    }

    /// Delay before attempt `failed + 1`, given `failed` failures so far.
    pub fn delay(&self, failed: u32) -> Duration {
        let nominal =
            self.base_delay.as_secs_f64() * self.factor.powi(failed.saturating_sub(1) as i32);
        let secs = if self.jitter {
            // equal jitter: half fixed, half uniform
            nominal / 2.0 + rand::rng().random_range(0.0..=nominal / 2.0)
        } else {
            nominal
        };
        Duration::from_secs_f64(secs)
    }
}

/// Counting semaphore bounding in-flight backend calls.
struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(n: usize) -> Self {
        Limiter {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

pub struct Gateway {
    backend: Arc<dyn Backend>,
    prices: PriceTable,
    ledger: UsageLedger,
    retry: RetryPolicy,
    limiter: Limiter,
    concurrency: usize,
    cache: Option<ResponseCache>,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>, prices: PriceTable) -> Self {
        Gateway {
            backend,
            prices,
            ledger: UsageLedger::default(),
            retry: RetryPolicy::default(),
            limiter: Limiter::new(DEFAULT_CONCURRENCY),
            concurrency: DEFAULT_CONCURRENCY,
            cache: None,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_concurrency(mut self, n: usize) -> Self {
        self.concurrency = n.max(1);
        self.limiter = Limiter::new(self.concurrency);
        self
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn concurrency(&self) -> usize {
        self.concurrency
    }

    pub fn ledger(&self) -> &UsageLedger {
        &self.ledger
    }

    pub fn prices(&self) -> &PriceTable {
        &self.prices
    }

    /// Cost of one response under this gateway's price table.
    pub fn cost(&self, model: &str, resp: &ChatResponse) -> Result<f64, GatewayError> {
        cost_of(resp.prompt_tokens, resp.completion_tokens, model, &self.prices)
    }

    pub fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        req.validate()?;
        // fail on unpriced models before spending anything
        self.prices.get(&req.model)?;
        let mut attempt = 0;
        loop {
            attempt += 1;
            let result = {
                let _permit = self.limiter.acquire();
                self.backend.send(req)
            };
            match result {
                Ok(resp) => {
                    let cost = self.cost(&req.model, &resp)?;
                    self.ledger.record(&req.model, &resp, cost);
                    return Ok(resp);
                }
                Err(BackendError::Fatal(msg)) => return Err(GatewayError::Fatal(msg)),
                Err(BackendError::Transient(msg)) => {
                    if attempt >= self.retry.max_attempts {
                        return Err(GatewayError::RetriesExhausted {
                            attempts: attempt,
                            last: msg,
                        });
                    }
                    let wait = self.retry.delay(attempt);
                    log::debug!("transient failure on attempt {attempt} ({msg}); retrying in {wait:?}");
                    if !wait.is_zero() {
                        std::thread::sleep(wait);
                    }
                }
            }
        }
    }

    /// Like [`Gateway::complete`], but served from the response cache when one
    /// is configured. Hits leave the ledger untouched.
    pub fn cached_complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let Some(cache) = &self.cache else {
            return self.complete(req);
        };
        req.validate()?;
        let key = cache_key(req);
        let _stripe = cache.lock_key(&key);
        if let Some(hit) = cache.get(&key) {
            return Ok(hit);
        }
        let resp = self.complete(req)?;
        if let Err(e) = cache.put(&key, req, &resp) {
            log::warn!("could not persist cache entry {key}: {e}");
        }
        Ok(resp)
    }
}
