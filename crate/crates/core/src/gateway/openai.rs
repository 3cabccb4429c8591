use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{Backend, BackendError, ChatRequest, ChatResponse, GatewayError};

pub const API_KEY_ENV: &str = "HALOFORGE_API_KEY";

/// Blocking client for an OpenAI-compatible `/chat/completions` endpoint.
pub struct OpenAiBackend {
    agent: ureq::Agent,
    base_url: String,
    api_key: String,
}

#[derive(Deserialize)]
struct Completion {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

impl OpenAiBackend {
    pub fn new(base_url: impl Into<String>, api_key: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .http_status_as_error(false)
            .build()
            .into();
        OpenAiBackend {
            agent,
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key: api_key.into(),
        }
    }

    /// Reads the key from `HALOFORGE_API_KEY`. No request is made if it is unset.
    pub fn from_env(base_url: impl Into<String>) -> Result<Self, GatewayError> {
        match std::env::var(API_KEY_ENV) {
            Ok(key) if !key.trim().is_empty() => Ok(Self::new(base_url, key)),
            _ => Err(GatewayError::Config(format!("{API_KEY_ENV} is not set"))),
        }
    }
}

/// 408, 429 and 5xx are worth retrying; every other status is final.
pub(crate) fn classify_status(code: u16, body: &str) -> BackendError {
    let msg = format!("HTTP {code}: {}", body.chars().take(300).collect::<String>());
    if code == 408 || code == 429 || (500..600).contains(&code) {
        BackendError::Transient(msg)
    } else {
        BackendError::Fatal(msg)
    }
}

pub(crate) fn classify_transport(err: ureq::Error) -> BackendError {
    match err {
        ureq::Error::StatusCode(code) => classify_status(code, ""),
        e @ (ureq::Error::Io(_)
        | ureq::Error::Timeout(_)
        | ureq::Error::HostNotFound
        | ureq::Error::ConnectionFailed
        | ureq::Error::Protocol(_)) => BackendError::Transient(e.to_string()),
        e => BackendError::Fatal(e.to_string()),
    }
}

impl Backend for OpenAiBackend {
    fn send(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let body = json!({
            "model": req.model,
            "messages": [{"role": "user", "content": req.prompt}],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        let resp = self
            .agent
            .post(&format!("{}/chat/completions", self.base_url))
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(&body)
            .map_err(classify_transport)?;
        let status = resp.status().as_u16();
        let mut body = resp.into_body();
        if status != 200 {
            let text = body.read_to_string().unwrap_or_default();
            return Err(classify_status(status, &text));
        }
        let parsed: Completion = body
            .read_json()
            .map_err(|e| BackendError::Fatal(format!("malformed completion: {e}")))?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError::Fatal("completion has no choices".into()))?;
        let (prompt_tokens, completion_tokens) = parsed
            .usage
            .map(|u| (u.prompt_tokens, u.completion_tokens))
            .unwrap_or((0, 0));
        Ok(ChatResponse {
            text,
            prompt_tokens,
            completion_tokens,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_classification() {
        assert!(matches!(classify_status(429, ""), BackendError::Transient(_)));
        assert!(matches!(classify_status(503, ""), BackendError::Transient(_)));
        assert!(matches!(classify_status(401, ""), BackendError::Fatal(_)));
        assert!(matches!(classify_status(400, ""), BackendError::Fatal(_)));
    }
}
