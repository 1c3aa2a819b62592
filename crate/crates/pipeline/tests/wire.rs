//! Client side of the chat-completions and NLI HTTP protocols, against
//! in-process mock servers.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use confilter_core::scorers::{EntailPair, Entailer, EntailmentTriple};
use confilter_core::Error;
use confilter_pipeline::http::RetryPolicy;
use confilter_pipeline::llm::{ChatClient, ChatRequest, OpenAiClient};
use confilter_pipeline::nli::{EntailRequest, EntailResponse, HttpEntailer, DEFAULT_BATCH_CAP};
use serde_json::{json, Value};

fn serve(router: Router) -> String {
    let (tx, rx) = std::sync::mpsc::channel::<SocketAddr>();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, router).await.unwrap();
        });
    });
    format!("http://{}", rx.recv().unwrap())
}

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        max_attempts: 3,
        initial_backoff_ms: 1,
        max_backoff_ms: 5,
        timeout_secs: 10,
    }
}

#[derive(Default)]
struct ChatState {
    hits: AtomicUsize,
    seen: Mutex<Vec<(Option<String>, Value)>>,
}

async fn flaky_chat(State(st): State<Arc<ChatState>>, headers: HeaderMap, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    let n = st.hits.fetch_add(1, Ordering::SeqCst);
    let auth = headers
        .get("authorization")
        .and_then(|v| v.to_str().ok())
        .map(str::to_string);
    st.seen.lock().unwrap().push((auth, body.clone()));
    if n == 0 {
        return (StatusCode::INTERNAL_SERVER_ERROR, Json(json!({"error": "busy"})));
    }
    let prompt = body["messages"][0]["content"].as_str().unwrap_or_default().to_string();
    let mut reply = json!({
        "choices": [{"message": {"role": "assistant", "content": format!("echo: {prompt}")}}]
    });
    if prompt.contains("with usage") {
        reply["usage"] = json!({"prompt_tokens": 11, "completion_tokens": 7, "total_tokens": 18});
    }
    (StatusCode::OK, Json(reply))
}

#[test]
fn chat_retries_server_errors_and_estimates_missing_usage() {
    let state = Arc::new(ChatState::default());
    let base = serve(Router::new().route("/v1/chat/completions", post(flaky_chat)).with_state(state.clone()));
    let client = OpenAiClient::new(&base, Some("sk-test".into()), fast_retry()).unwrap();

    let done = client.chat(&ChatRequest::user("m1", "three word prompt", 0.0)).unwrap();
    assert_eq!(done.text, "echo: three word prompt");
    assert!(done.usage.approximate);
    assert_eq!(done.usage.prompt_tokens, 3);
    assert_eq!(done.usage.completion_tokens, 4);
    assert_eq!(state.hits.load(Ordering::SeqCst), 2);

    let done = client.chat(&ChatRequest::user("m1", "with usage", 0.5)).unwrap();
    assert!(!done.usage.approximate);
    assert_eq!((done.usage.prompt_tokens, done.usage.completion_tokens), (11, 7));

    let seen = state.seen.lock().unwrap();
    let (auth, body) = &seen[2];
    assert_eq!(auth.as_deref(), Some("Bearer sk-test"));
    assert_eq!(body["model"], "m1");
    assert_eq!(body["temperature"], 0.5);
    assert_eq!(body["messages"][0]["role"], "user");
}

async fn always_down() -> StatusCode {
    StatusCode::SERVICE_UNAVAILABLE
}

async fn bad_request() -> StatusCode {
    StatusCode::BAD_REQUEST
}

#[test]
fn chat_gives_up_after_the_retry_budget() {
    let base = serve(
        Router::new()
            .route("/v1/chat/completions", post(always_down))
            .route("/bad/v1/chat/completions", post(bad_request)),
    );
    let err = OpenAiClient::new(&base, None, fast_retry())
        .unwrap()
        .chat(&ChatRequest::user("m", "p", 0.0))
        .unwrap_err();
    assert!(matches!(err, Error::Transport(_) | Error::Protocol(_)), "{err}");
    let err = OpenAiClient::new(&format!("{base}/bad"), None, fast_retry())
        .unwrap()
        .chat(&ChatRequest::user("m", "p", 0.0))
        .unwrap_err();
    assert!(matches!(err, Error::Protocol(_)), "{err}");
}

#[derive(Default)]
struct NliState {
    batches: Mutex<Vec<usize>>,
    models: Mutex<Vec<Option<String>>>,
}

/// Entailment mass is read from the hypothesis, so order mistakes show up.
fn triple_for(p: &EntailPair) -> EntailmentTriple {
    let e: f64 = p.hypothesis.trim_start_matches('h').parse::<f64>().unwrap() / 1000.0;
    EntailmentTriple::new(e, 1.0 - e, 0.0)
}

async fn entail(State(st): State<Arc<NliState>>, Json(req): Json<EntailRequest>) -> Json<EntailResponse> {
    st.batches.lock().unwrap().push(req.pairs.len());
    st.models.lock().unwrap().push(req.model.clone());
    Json(EntailResponse {
        triples: req.pairs.iter().map(triple_for).collect(),
        model: req.model.unwrap_or_else(|| "stub".into()),
        latency_ms: 0.1,
    })
}

async fn entail_short(Json(req): Json<EntailRequest>) -> Json<EntailResponse> {
    Json(EntailResponse {
        triples: req.pairs.iter().skip(1).map(triple_for).collect(),
        model: "stub".into(),
        latency_ms: 0.1,
    })
}

async fn entail_invalid(Json(req): Json<EntailRequest>) -> Json<Value> {
    let triples: Vec<Value> = req
        .pairs
        .iter()
        .map(|_| json!({"entailment": 0.9, "neutral": 0.9, "contradiction": 0.9}))
        .collect();
    Json(json!({"triples": triples, "model": "stub", "latency_ms": 0.0}))
}

fn pairs(n: usize) -> Vec<EntailPair> {
    (0..n)
        .map(|i| EntailPair {
            premise: format!("premise {i}"),
            hypothesis: format!("h{}", i % 1000),
        })
        .collect()
}

#[test]
fn nli_batches_are_capped_and_order_is_kept() {
    let state = Arc::new(NliState::default());
    let base = serve(Router::new().route("/v1/entail", post(entail)).with_state(state.clone()));
    let nli = HttpEntailer::new(&base, Some("deberta".into()), fast_retry()).unwrap();
    let input = pairs(150);
    let out = nli.entail(&input).unwrap();
    assert_eq!(out.len(), 150);
    for (p, t) in input.iter().zip(&out) {
        assert_eq!(*t, triple_for(p));
    }
    assert_eq!(*state.batches.lock().unwrap(), vec![DEFAULT_BATCH_CAP, DEFAULT_BATCH_CAP, 22]);
    assert!(state.models.lock().unwrap().iter().all(|m| m.as_deref() == Some("deberta")));

    let small = HttpEntailer::new(&base, None, fast_retry()).unwrap().with_batch_cap(4);
    small.entail(&pairs(9)).unwrap();
    assert_eq!(state.batches.lock().unwrap()[3..], [4, 4, 1]);
    assert_eq!(state.models.lock().unwrap()[3], None);
}

#[test]
fn nli_length_mismatch_and_bad_triples_are_protocol_errors() {
    let base = serve(
        Router::new()
            .route("/short/v1/entail", post(entail_short))
            .route("/invalid/v1/entail", post(entail_invalid)),
    );
    let short = HttpEntailer::new(&format!("{base}/short"), None, fast_retry()).unwrap();
    assert!(matches!(short.entail(&pairs(3)), Err(Error::Protocol(_))));
    let invalid = HttpEntailer::new(&format!("{base}/invalid"), None, fast_retry()).unwrap();
    assert!(matches!(invalid.entail(&pairs(2)), Err(Error::Protocol(_))));
}

#[test]
fn request_and_response_wire_shapes() {
    let req = EntailRequest {
        pairs: vec![EntailPair {
            premise: "p".into(),
            hypothesis: "h".into(),
        }],
        model: None,
    };
    assert_eq!(
        serde_json::to_value(&req).unwrap(),
        json!({"pairs": [{"premise": "p", "hypothesis": "h"}]})
    );
    let resp: EntailResponse = serde_json::from_value(json!({
        "triples": [{"entailment": 0.7, "neutral": 0.2, "contradiction": 0.1}],
        "model": "m",
        "latency_ms": 3.5
    }))
    .unwrap();
    assert_eq!(resp.triples[0], EntailmentTriple::new(0.7, 0.2, 0.1));
}
