mod common;

use common::Stub;
use haloforge::corpus::{DialogueExample, KnowledgeSource, Label, LabelSpace, Triplet, Turn};
use haloforge::detection::{
    ClassifyRequest, DetectionError, Detector, LatencyClock, RemoteClassifier,
};
use haloforge::evaluation::{evaluate, EvalOptions};
use serde_json::{json, Value};

fn example(id: &str, response: &str) -> DialogueExample {
    DialogueExample::new(
        id,
        KnowledgeSource::KgTriplets {
            triplets: vec![Triplet::new("Inception", "directed_by", "Christopher Nolan")],
        },
        vec![Turn::user("Who directed Inception?")],
    )
    .with_response(response)
}

/// Stand-in for the classifier service: faithful iff the response names Nolan.
fn service() -> Stub {
    Stub::start(|seen, _| match seen.url.as_str() {
        "/health" => (200, "{}".into()),
        "/classify" => {
            let req: ClassifyRequest = match serde_json::from_str(&seen.body) {
                Ok(r) => r,
                Err(e) => return (400, json!({"error": e.to_string()}).to_string()),
            };
            if req.label_space != LabelSpace::Binary {
                return (409, r#"{"error":"binary checkpoint"}"#.into());
            }
            let yes = if req.response.contains("Nolan") { 0.9 } else { 0.2 };
            let label = if yes > 0.5 { "faithful" } else { "hallucinated" };
            let body = json!({
                "label": label,
                "scores": {"faithful": yes, "hallucinated": 1.0 - yes},
                "latency_ms": 12.5
            });
            (200, body.to_string())
        }
        _ => (404, "{}".into()),
    })
}

#[test]
fn request_matches_wire_contract() {
    let stub = service();
    let rc = RemoteClassifier::new(&stub.url);
    rc.health().unwrap();
    let v = rc
        .classify(&example("a", "Christopher Nolan did."), LabelSpace::Binary)
        .unwrap();
    assert_eq!(v.label, Label::Faithful);
    assert!((v.scores.values().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(v.latency_ms > 0.0);

    let seen = stub.requests();
    let body: Value = serde_json::from_str(&seen[1].body).unwrap();
    assert_eq!(seen[1].method, "POST");
    assert_eq!(
        body,
        json!({
            "knowledge": "Inception | directed_by | Christopher Nolan",
            "history": [{"speaker": "user", "text": "Who directed Inception?"}],
            "response": "Christopher Nolan did.",
            "label_space": "binary"
        })
    );
}

#[test]
fn service_errors_surface() {
    let stub = service();
    let rc = RemoteClassifier::new(&stub.url);
    match rc.classify(&example("a", "x"), LabelSpace::Ternary) {
        Err(DetectionError::Remote { status: 409, .. }) => {}
        other => panic!("expected 409, got {other:?}"),
    }
    assert!(matches!(
        rc.classify(&DialogueExample::new("b", KnowledgeSource::Document { document: "d".into() }, vec![]), LabelSpace::Binary),
        Err(DetectionError::MissingResponse(_))
    ));
}

#[test]
fn unreachable_service_is_a_transport_error() {
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let rc = RemoteClassifier::new(format!("http://127.0.0.1:{port}"));
    assert!(matches!(
        rc.classify(&example("a", "x"), LabelSpace::Binary),
        Err(DetectionError::Transport(_))
    ));
}

#[test]
fn evaluates_through_the_stub() {
    let stub = service();
    let mut rc = RemoteClassifier::new(&stub.url);
    rc.clock = LatencyClock::Fixed(40.0);
    let set = vec![
        example("a", "Christopher Nolan directed it.").with_label(Label::Faithful),
        example("b", "Steven Spielberg directed it.").with_label(Label::Hallucinated),
        example("c", "Nolan, in 1999.").with_label(Label::Hallucinated),
    ];
    let r = evaluate(&rc, &set, EvalOptions::new(LabelSpace::Binary)).unwrap();
    assert_eq!(r.examples, 3);
    assert!((r.accuracy - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(r.latency_p50_s, 0.04);
    // one request per example, never batched
    assert_eq!(stub.requests().len(), 3);
}
