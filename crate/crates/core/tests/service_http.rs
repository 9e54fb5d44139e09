mod common;

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use kgrec::fixtures::overfit_fixture;
use kgrec::model::{AblationFlags, RecommenderModel};
use kgrec::service::{router, ChatResponse, Health, ServiceState, Snapshot};
use serde_json::{json, Value};
use tower::ServiceExt;

use common::tiny_config;

fn snapshot(seed: u64) -> Snapshot {
    let fx = overfit_fixture(8, 3);
    let model = RecommenderModel::new(tiny_config(16), fx.tokenizer, fx.kg, AblationFlags::default(), seed).unwrap();
    Snapshot::new(model, format!("hash-{seed}")).unwrap()
}

async fn call(state: &Arc<ServiceState>, method: &str, uri: &str, body: Option<String>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, Body::from))
        .unwrap();
    let resp = router(state.clone(), false).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn chat_body(top_k: usize) -> String {
    json!({
        "history": [
            {"speaker": "seeker", "text": "hi, any scary movies?"},
            {"speaker": "recommender", "text": "sure, what did you like before?"},
            {"speaker": "seeker", "text": "something like Alien"}
        ],
        "top_k": top_k
    })
    .to_string()
}

#[tokio::test]
async fn chat_returns_ranked_items_and_both_texts() {
    let state = Arc::new(ServiceState::new(Some(snapshot(1))));
    let (status, body) = call(&state, "POST", "/api/chat", Some(chat_body(4))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let resp: ChatResponse = serde_json::from_value(body).unwrap();
    assert_eq!(resp.recommendations.len(), 4);
    assert!(resp.recommendations.windows(2).all(|w| w[0].score >= w[1].score));
    assert!(!resp.filled_response.contains("[MOVIE]"), "{}", resp.filled_response);
    assert_eq!(resp.model_info.checkpoint_hash, "hash-1");

    let beam = json!({"history": [{"speaker": "seeker", "text": "hello"}], "decode": "beam"}).to_string();
    let (status, body) = call(&state, "POST", "/api/chat", Some(beam)).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["recommendations"].as_array().unwrap().len(), 5);
}

#[tokio::test]
async fn malformed_requests_are_rejected() {
    let state = Arc::new(ServiceState::new(Some(snapshot(1))));
    for body in [
        "not json".to_string(),
        json!({"history": []}).to_string(),
        json!({"history": [{"speaker": "seeker", "text": "x"}], "top_k": 0}).to_string(),
        json!({"history": [{"speaker": "seeker", "text": "x"}], "top_k": 51}).to_string(),
        json!({"history": [{"speaker": "bot", "text": "x"}]}).to_string(),
        json!({"history": [{"speaker": "seeker", "text": "x"}], "extra": 1}).to_string(),
    ] {
        let (status, resp) = call(&state, "POST", "/api/chat", Some(body.clone())).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
        assert!(resp["error"].is_string());
    }
}

#[tokio::test]
async fn no_model_means_unavailable_and_swap_loads_one() {
    let state = Arc::new(ServiceState::default());
    let (status, health) = call(&state, "GET", "/api/health", None).await;
    assert_eq!(status, StatusCode::OK);
    let health: Health = serde_json::from_value(health).unwrap();
    assert!(!health.model_loaded);
    let (status, _) = call(&state, "POST", "/api/chat", Some(chat_body(3))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);

    state.swap(snapshot(2));
    let (_, health) = call(&state, "GET", "/api/health", None).await;
    assert_eq!(health["checkpoint_hash"], "hash-2");
    assert_eq!(health["profile"], "desk");
    let (status, _) = call(&state, "POST", "/api/chat", Some(chat_body(3))).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn schema_is_served() {
    let state = Arc::new(ServiceState::default());
    let (status, schema) = call(&state, "GET", "/schema", None).await;
    assert_eq!(status, StatusCode::OK);
    for def in ["ChatRequest", "ChatResponse", "Health"] {
        assert!(schema["$defs"][def].is_object(), "missing {def}");
    }
}
