//! HTTP chat service over an immutable model snapshot.
//!
//! `POST /api/chat`, `GET /api/health`, `GET /schema`. Requests carry the
//! whole dialogue history; the server keeps no conversation state.

use std::net::SocketAddr;
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpus::{Speaker, Utterance};
use crate::error::{Error, Result};
use crate::model::{DecodeStrategy, EntityRepresentations, Profile, RecommenderModel};

pub const MAX_TOP_K: usize = 50;
pub const BEAM_WIDTH: usize = 4;

fn default_top_k() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub speaker: Speaker,
    pub text: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    #[default]
    Greedy,
    Beam,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatRequest {
    pub history: Vec<ChatTurn>,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default)]
    pub decode: DecodeMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendedItem {
    pub entity_id: String,
    pub name: String,
    pub year: Option<i32>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub checkpoint_hash: String,
    pub profile: Profile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub raw_response: String,
    pub filled_response: String,
    pub recommendations: Vec<RecommendedItem>,
    pub model_info: ModelInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub model_loaded: bool,
    pub checkpoint_hash: Option<String>,
    pub profile: Option<Profile>,
    pub uptime_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ServiceError {
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("no model loaded")]
    Unavailable,
    #[error("internal error: {0}")]
    Internal(String),
}

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::Unavailable => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        (self.status(), Json(json!({ "error": self.to_string() }))).into_response()
    }
}

/// A loaded model with its entity representations precomputed.
#[derive(Debug)]
pub struct Snapshot {
    pub model: RecommenderModel,
    pub entities: EntityRepresentations,
    pub checkpoint_hash: String,
}

impl Snapshot {
    pub fn new(model: RecommenderModel, checkpoint_hash: String) -> Result<Self> {
        Ok(Self {
            entities: model.entity_representations()?,
            model,
            checkpoint_hash,
        })
    }
}

impl ChatRequest {
    pub fn validate(&self) -> std::result::Result<(), ServiceError> {
        if self.history.is_empty() {
            return Err(ServiceError::BadRequest("history must not be empty".into()));
        }
        if !(1..=MAX_TOP_K).contains(&self.top_k) {
            return Err(ServiceError::BadRequest(format!(
                "top_k must be between 1 and {MAX_TOP_K}"
            )));
        }
        Ok(())
    }
}

/// The chat operation, independent of transport.
pub fn handle_chat(snapshot: Option<&Snapshot>, req: &ChatRequest) -> std::result::Result<ChatResponse, ServiceError> {
    req.validate()?;
    let snap = snapshot.ok_or(ServiceError::Unavailable)?;
    let model = &snap.model;
    let context: Vec<Utterance> = req
        .history
        .iter()
        .map(|t| Utterance::new(t.speaker, t.text.clone()))
        .collect();
    let strategy = match req.decode {
        DecodeMode::Greedy => DecodeStrategy::Greedy,
        DecodeMode::Beam => DecodeStrategy::Beam { width: BEAM_WIDTH },
    };
    let out = model
        .respond(&context, &snap.entities, req.top_k, model.config().max_response_len, strategy)
        .map_err(|e| match e {
            Error::Validation(m) => ServiceError::BadRequest(m),
            other => ServiceError::Internal(other.to_string()),
        })?;
    let recommendations = out
        .recommendations
        .top_k
        .iter()
        .map(|(id, p)| {
            let node = model.kg().node(id).expect("recommended ids come from the graph");
            RecommendedItem {
                entity_id: id.clone(),
                name: node.name.clone(),
                year: node.release_year,
                score: *p,
            }
        })
        .collect();
    Ok(ChatResponse {
        raw_response: out.raw,
        filled_response: out.filled,
        recommendations,
        model_info: ModelInfo {
            checkpoint_hash: snap.checkpoint_hash.clone(),
            profile: model.config().profile,
        },
    })
}

/// Shared server state; the snapshot can be swapped while serving.
#[derive(Debug)]
pub struct ServiceState {
    snapshot: RwLock<Option<Arc<Snapshot>>>,
    started: Instant,
}

impl Default for ServiceState {
    fn default() -> Self {
        Self::new(None)
    }
}

impl ServiceState {
    pub fn new(snapshot: Option<Snapshot>) -> Self {
        Self {
            snapshot: RwLock::new(snapshot.map(Arc::new)),
            started: Instant::now(),
        }
    }

    pub fn current(&self) -> Option<Arc<Snapshot>> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    /// Replaces the snapshot; in-flight requests finish on the old one.
    pub fn swap(&self, snapshot: Snapshot) {
        *self.snapshot.write().expect("snapshot lock") = Some(Arc::new(snapshot));
    }

    pub fn health(&self) -> Health {
        let snap = self.current();
        Health {
            model_loaded: snap.is_some(),
            checkpoint_hash: snap.as_ref().map(|s| s.checkpoint_hash.clone()),
            profile: snap.as_ref().map(|s| s.model.config().profile),
            uptime_secs: self.started.elapsed().as_secs_f64(),
        }
    }
}

/// JSON Schema of the wire types.
pub fn schema() -> serde_json::Value {
    json!({
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "$defs": {
            "ChatRequest": {
                "type": "object",
                "required": ["history"],
                "additionalProperties": false,
                "properties": {
                    "history": {
                        "type": "array",
                        "minItems": 1,
                        "items": {
                            "type": "object",
                            "required": ["speaker", "text"],
                            "properties": {
                                "speaker": { "enum": ["seeker", "recommender"] },
                                "text": { "type": "string" }
                            }
                        }
                    },
                    "top_k": { "type": "integer", "minimum": 1, "maximum": MAX_TOP_K, "default": 5 },
                    "decode": { "enum": ["greedy", "beam"], "default": "greedy" }
                }
            },
            "ChatResponse": {
                "type": "object",
                "required": ["raw_response", "filled_response", "recommendations", "model_info"],
                "properties": {
                    "raw_response": { "type": "string" },
                    "filled_response": { "type": "string" },
                    "recommendations": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "required": ["entity_id", "name", "year", "score"],
                            "properties": {
                                "entity_id": { "type": "string" },
                                "name": { "type": "string" },
                                "year": { "type": ["integer", "null"] },
                                "score": { "type": "number" }
                            }
                        }
                    },
                    "model_info": {
                        "type": "object",
                        "required": ["checkpoint_hash", "profile"],
                        "properties": {
                            "checkpoint_hash": { "type": "string" },
                            "profile": { "enum": ["desk", "pretrained"] }
                        }
                    }
                }
            },
            "Health": {
                "type": "object",
                "required": ["model_loaded", "checkpoint_hash", "profile", "uptime_secs"],
                "properties": {
                    "model_loaded": { "type": "boolean" },
                    "checkpoint_hash": { "type": ["string", "null"] },
                    "profile": { "enum": ["desk", "pretrained", null] },
                    "uptime_secs": { "type": "number" }
                }
            }
        }
    })
}

async fn chat(State(state): State<Arc<ServiceState>>, body: Bytes) -> std::result::Result<Json<ChatResponse>, ServiceError> {
    let req: ChatRequest = serde_json::from_slice(&body).map_err(|e| ServiceError::BadRequest(e.to_string()))?;
    let snapshot = state.current();
    tokio::task::spawn_blocking(move || handle_chat(snapshot.as_deref(), &req))
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))?
        .map(Json)
}

async fn health(State(state): State<Arc<ServiceState>>) -> Json<Health> {
    Json(state.health())
}

async fn schema_doc() -> Json<serde_json::Value> {
    Json(schema())
}

pub fn router(state: Arc<ServiceState>, permissive_cors: bool) -> Router {
    let router = Router::new()
        .route("/api/chat", post(chat))
        .route("/api/health", get(health))
        .route("/schema", get(schema_doc))
        .with_state(state);
    if permissive_cors {
        router.layer(tower_http::cors::CorsLayer::permissive())
    } else {
        router
    }
}

/// Serves until Ctrl-C.
pub async fn serve(addr: SocketAddr, state: Arc<ServiceState>, permissive_cors: bool) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::io(addr.to_string(), e))?;
    log::info!("listening on {addr}");
    axum::serve(listener, router(state, permissive_cors))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Error::io(addr.to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(top_k: usize) -> ChatRequest {
        ChatRequest {
            history: vec![ChatTurn {
                speaker: Speaker::Seeker,
                text: "hi".into(),
            }],
            top_k,
            decode: DecodeMode::Greedy,
        }
    }

    #[test]
    fn validation_precedes_availability() {
        assert!(matches!(handle_chat(None, &req(0)), Err(ServiceError::BadRequest(_))));
        assert!(matches!(handle_chat(None, &req(51)), Err(ServiceError::BadRequest(_))));
        assert_eq!(handle_chat(None, &req(5)), Err(ServiceError::Unavailable));
        let empty = ChatRequest {
            history: vec![],
            ..req(5)
        };
        assert!(matches!(handle_chat(None, &empty), Err(ServiceError::BadRequest(_))));
    }

    #[test]
    fn request_defaults() {
        let r: ChatRequest = serde_json::from_str(r#"{"history":[{"speaker":"seeker","text":"x"}]}"#).unwrap();
        assert_eq!(r.top_k, 5);
        assert_eq!(r.decode, DecodeMode::Greedy);
    }

    #[test]
    fn health_before_load() {
        let h = ServiceState::default().health();
        assert!(!h.model_loaded);
        assert_eq!(h.checkpoint_hash, None);
    }
}
