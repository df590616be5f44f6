use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use fedchat_core::fedsim::{HistoryRow, RunHistory};
use fedchat_core::ingest::{Block, RawDocument};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::{AppState, ContextFilter, ServiceError};

pub const MAX_QUESTION_BYTES: usize = 4096;
pub const MAX_K: usize = 20;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AskRequest {
    pub question: String,
    #[serde(default)]
    pub context: Option<String>,
    #[serde(default)]
    pub k: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct IngestDocument {
    pub source_uri: String,
    pub text: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestRequest {
    pub documents: Vec<IngestDocument>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BlockView<'a> {
    #[serde(flatten)]
    pub block: &'a Block,
    pub source_uri: &'a str,
}

/// JSON error body `{"error": ...}` with a status code.
#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl ApiError {
    fn bad_request(msg: impl Into<String>) -> Self {
        Self(StatusCode::BAD_REQUEST, msg.into())
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let status = match &e {
            ServiceError::NotReady => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::Storage(_) => StatusCode::INSUFFICIENT_STORAGE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(ApiError::from)
}

async fn ask(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let req: AskRequest = parse(&body)?;
    if req.question.trim().is_empty() {
        return Err(ApiError::bad_request("question is empty"));
    }
    if req.question.len() > MAX_QUESTION_BYTES {
        return Err(ApiError::bad_request(format!(
            "question exceeds {MAX_QUESTION_BYTES} bytes"
        )));
    }
    if let Some(k) = req.k {
        if k == 0 || k > MAX_K {
            return Err(ApiError::bad_request(format!("k must be in 1..={MAX_K}")));
        }
    }
    let context = match &req.context {
        None => None,
        Some(name) => match state.config.contexts().remove(name) {
            Some(words) => Some(words),
            None => return Err(ApiError(StatusCode::NOT_FOUND, format!("unknown context `{name}`"))),
        },
    };
    let snap = state.snapshot().ok_or(ServiceError::NotReady)?;
    let resp = blocking(move || state.ask(&snap, &req.question, context.as_ref(), req.k)).await?;
    Ok(Json(resp).into_response())
}

async fn ingest(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let req: IngestRequest = parse(&body)?;
    if req.documents.is_empty() {
        return Err(ApiError::bad_request("no documents"));
    }
    if let Some(d) = req.documents.iter().find(|d| d.text.trim().is_empty()) {
        return Err(ApiError::bad_request(format!(
            "document `{}` has no text",
            d.source_uri
        )));
    }
    let now = Utc::now();
    let docs: Vec<RawDocument> = req
        .documents
        .into_iter()
        .map(|d| RawDocument::new(d.source_uri, d.text, now))
        .collect();
    let summary = blocking(move || state.ingest(docs)).await?;
    Ok(Json(summary).into_response())
}

async fn get_block(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let snap = state.snapshot().ok_or(ServiceError::NotReady)?;
    let block = snap
        .corpus
        .block(&id)
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown block `{id}`")))?;
    let source_uri = snap
        .corpus
        .document(&block.doc_id)
        .map_or("", |d| d.source_uri.as_str());
    Ok(Json(BlockView { block, source_uri }).into_response())
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    match state.snapshot() {
        Some(s) => Json(json!({
            "status": "ok",
            "index_version": s.version,
            "blocks": s.corpus.blocks.len(),
        }))
        .into_response(),
        None => (StatusCode::SERVICE_UNAVAILABLE, Json(json!({ "status": "loading" }))).into_response(),
    }
}

async fn metrics(State(state): State<Arc<AppState>>) -> Result<Json<Vec<HistoryRow>>, ApiError> {
    let path = state.config.history_path.clone();
    if !path.exists() {
        return Ok(Json(Vec::new()));
    }
    let history = blocking(move || RunHistory::load(&path).map_err(ServiceError::from)).await?;
    Ok(Json(history.rows))
}

async fn contexts(State(state): State<Arc<AppState>>) -> Json<Vec<ContextFilter>> {
    Json(state.config.context_filters.clone())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/ask", post(ask))
        .route("/api/ingest", post(ingest))
        .route("/api/blocks/{id}", get(get_block))
        .route("/api/health", get(health))
        .route("/api/metrics", get(metrics))
        .route("/api/contexts", get(contexts))
        .with_state(state)
}
