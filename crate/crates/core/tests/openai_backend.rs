mod common;

use std::sync::Arc;

use common::Stub;
use haloforge::gateway::{
    ChatRequest, Gateway, GatewayError, ModelPrice, OpenAiBackend, PriceTable, RetryPolicy,
    API_KEY_ENV,
};
use serde_json::{json, Value};

fn completion(text: &str) -> String {
    json!({
        "id": "cmpl-1",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": text}}],
        "usage": {"prompt_tokens": 1000, "completion_tokens": 500, "total_tokens": 1500}
    })
    .to_string()
}

fn gateway(url: &str) -> Gateway {
    let prices = PriceTable::from_iter([("gpt-test", ModelPrice::new(0.01, 0.03))]);
    Gateway::new(Arc::new(OpenAiBackend::new(url, "sk-test")), prices)
        .with_retry(RetryPolicy::immediate())
}

#[test]
fn sends_openai_wire_format_and_records_cost() {
    let stub = Stub::start(|_, _| (200, completion("#Response#: Nolan.")));
    let gw = gateway(&stub.url);
    let req = ChatRequest::new("gpt-test", "hello").temperature(0.5).max_tokens(64);
    let resp = gw.complete(&req).unwrap();
    assert_eq!(resp.text, "#Response#: Nolan.");
    assert_eq!((resp.prompt_tokens, resp.completion_tokens), (1000, 500));

    let seen = stub.requests();
    assert_eq!(seen.len(), 1);
    assert_eq!(seen[0].method, "POST");
    assert_eq!(seen[0].url, "/chat/completions");
    assert_eq!(seen[0].authorization.as_deref(), Some("Bearer sk-test"));
    let body: Value = serde_json::from_str(&seen[0].body).unwrap();
    assert_eq!(body["model"], "gpt-test");
    assert_eq!(body["messages"][0]["role"], "user");
    assert_eq!(body["messages"][0]["content"], "hello");
    assert_eq!(body["temperature"], 0.5);
    assert_eq!(body["max_tokens"], 64);

    let snap = gw.ledger().snapshot();
    assert!((snap.total_cost_usd() - 0.025).abs() < 1e-12);
    assert_eq!(snap.total_requests(), 1);
}

#[test]
fn retries_rate_limits_and_server_errors() {
    let stub = Stub::start(|_, n| match n {
        0 => (429, r#"{"error":"slow down"}"#.into()),
        1 => (503, "unavailable".into()),
        _ => (200, completion("OK")),
    });
    let gw = gateway(&stub.url);
    let resp = gw.complete(&ChatRequest::new("gpt-test", "p")).unwrap();
    assert_eq!(resp.text, "OK");
    assert_eq!(stub.requests().len(), 3);
    assert_eq!(gw.ledger().snapshot().total_requests(), 1);
}

#[test]
fn gives_up_after_five_attempts() {
    let stub = Stub::start(|_, _| (500, "boom".into()));
    let gw = gateway(&stub.url);
    match gw.complete(&ChatRequest::new("gpt-test", "p")) {
        Err(GatewayError::RetriesExhausted { attempts, .. }) => assert_eq!(attempts, 5),
        other => panic!("expected exhaustion, got {other:?}"),
    }
    assert_eq!(stub.requests().len(), 5);
    assert_eq!(gw.ledger().snapshot().total_requests(), 0);
}

#[test]
fn auth_failures_are_not_retried() {
    let stub = Stub::start(|_, _| (401, r#"{"error":"bad key"}"#.into()));
    let gw = gateway(&stub.url);
    let err = gw.complete(&ChatRequest::new("gpt-test", "p")).unwrap_err();
    assert!(matches!(err, GatewayError::Fatal(ref m) if m.contains("401")), "{err}");
    assert_eq!(stub.requests().len(), 1);
}

#[test]
fn malformed_completion_is_fatal() {
    let stub = Stub::start(|_, _| (200, r#"{"choices": []}"#.into()));
    let gw = gateway(&stub.url);
    assert!(matches!(
        gw.complete(&ChatRequest::new("gpt-test", "p")),
        Err(GatewayError::Fatal(_))
    ));
    assert_eq!(stub.requests().len(), 1);
}

#[test]
fn unreachable_host_is_transient() {
    // bind then drop to get a port nobody listens on
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let gw = gateway(&format!("http://127.0.0.1:{port}"));
    assert!(matches!(
        gw.complete(&ChatRequest::new("gpt-test", "p")),
        Err(GatewayError::RetriesExhausted { attempts: 5, .. })
    ));
}

#[test]
fn missing_key_is_a_config_error() {
    std::env::remove_var(API_KEY_ENV);
    assert!(matches!(
        OpenAiBackend::from_env("http://127.0.0.1:9"),
        Err(GatewayError::Config(m)) if m.contains(API_KEY_ENV)
    ));
    std::env::set_var(API_KEY_ENV, "  ");
    assert!(OpenAiBackend::from_env("http://127.0.0.1:9").is_err());
    std::env::set_var(API_KEY_ENV, "sk-env");
    assert!(OpenAiBackend::from_env("http://127.0.0.1:9").is_ok());
    std::env::remove_var(API_KEY_ENV);
}
