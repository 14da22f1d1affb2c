//! HTTP service for the generative dictionary.
//!
//! | Method | Path | Body / query |
//! |---|---|---|
//! | POST | `/api/define` | `{word, context, mode}` |
//! | POST | `/api/feedback` | `{word, context?, proposed_definition, client_id?, client_timestamp?}` |
//! | POST | `/api/suggestion` | `{message, word?, context?, client_id?, client_timestamp?}` |
//! | GET | `/api/examples` | `?word=&k=` |
//! | GET | `/api/health` | |
//! | GET | `/api/admin/feedback` | |
//!
//! Errors are `{"error": {"code", "message"}}` with codes
//! `malformed_request` (400), `empty_field` (400), `unsupported_mode` (400),
//! `invalid_record` (400), `word_not_in_context` (422),
//! `model_unavailable` (503), `generation_failed` and `storage_failure` (500).

pub mod config;
pub mod feedback;

use std::collections::BTreeMap;
use std::future::Future;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Json;
use defgen_core::router::{Mode, QueryRequest, Router, RouterError};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::CorsLayer;

use crate::config::ServiceConfig;
use crate::feedback::{FeedbackStore, Kind, NewRecord, StoreError};

const MAX_EXAMPLES: usize = 50;

#[derive(Clone)]
pub struct AppState {
    router: Arc<Router>,
    store: FeedbackStore,
}

impl AppState {
    pub fn new(router: Router, store: FeedbackStore) -> Self {
        AppState {
            router: Arc::new(router),
            store,
        }
    }

    pub fn store(&self) -> &FeedbackStore {
        &self.store
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }

    fn malformed(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "malformed_request", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": { "code": self.code, "message": self.message } });
        (self.status, Json(body)).into_response()
    }
}

impl From<RouterError> for ApiError {
    fn from(e: RouterError) -> Self {
        let message = e.to_string();
        match e {
            RouterError::EmptyField(_) => Self::new(StatusCode::BAD_REQUEST, "empty_field", message),
            RouterError::WordNotInContext => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "word_not_in_context", message),
            RouterError::ModelUnavailable(_) => Self::new(StatusCode::SERVICE_UNAVAILABLE, "model_unavailable", message),
            RouterError::Generation(_) => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "generation_failed", message),
        }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Invalid(_) => Self::new(StatusCode::BAD_REQUEST, "invalid_record", e.to_string()),
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "storage_failure", e.to_string()),
        }
    }
}

/// JSON bodies are parsed by hand so that every shape error is a 400.
fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::malformed(e.to_string()))
}

fn required(field: Option<String>, name: &str) -> Result<String, ApiError> {
    field.ok_or_else(|| ApiError::malformed(format!("missing field `{name}`")))
}

#[derive(Deserialize)]
struct DefineBody {
    word: Option<String>,
    context: Option<String>,
    mode: Option<String>,
}

async fn define(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let body: DefineBody = parse(&body)?;
    let word = required(body.word, "word")?;
    let context = required(body.context, "context")?;
    let mode = match body.mode {
        None => Mode::EnEn,
        Some(m) => m
            .parse::<Mode>()
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "unsupported_mode", e))?,
    };
    let request = QueryRequest::new(word, context, mode);
    let router = state.router.clone();
    let result = tokio::task::spawn_blocking(move || router.define(&request))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "generation_failed", e.to_string()))??;
    Ok(Json(result).into_response())
}

#[derive(Deserialize)]
struct FeedbackBody {
    word: Option<String>,
    context: Option<String>,
    proposed_definition: Option<String>,
    client_id: Option<String>,
    client_timestamp: Option<String>,
}

#[derive(Deserialize)]
struct SuggestionBody {
    word: Option<String>,
    context: Option<String>,
    message: Option<String>,
    client_id: Option<String>,
    client_timestamp: Option<String>,
}

#[derive(Serialize)]
struct Ack {
    id: u64,
    timestamp: chrono::DateTime<chrono::Utc>,
}

async fn store_record(state: &AppState, record: NewRecord) -> Result<Response, ApiError> {
    let stored = state.store.append(record).await?;
    Ok(Json(Ack {
        id: stored.id,
        timestamp: stored.timestamp,
    })
    .into_response())
}

async fn feedback(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let body: FeedbackBody = parse(&body)?;
    let record = NewRecord {
        kind: Kind::Feedback,
        word: Some(required(body.word, "word")?),
        context: body.context,
        text: required(body.proposed_definition, "proposed_definition")?,
        client_id: body.client_id,
        client_timestamp: body.client_timestamp,
    };
    store_record(&state, record).await
}

async fn suggestion(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let body: SuggestionBody = parse(&body)?;
    let record = NewRecord {
        kind: Kind::Suggestion,
        word: body.word,
        context: body.context,
        text: required(body.message, "message")?,
        client_id: body.client_id,
        client_timestamp: body.client_timestamp,
    };
    store_record(&state, record).await
}

#[derive(Deserialize)]
struct ExamplesQuery {
    word: Option<String>,
    k: Option<usize>,
}

async fn examples(
    State(state): State<AppState>,
    query: Result<Query<ExamplesQuery>, QueryRejection>,
) -> Result<Response, ApiError> {
    let Query(q) = query.map_err(|e| ApiError::malformed(e.body_text()))?;
    let word = required(q.word, "word")?;
    let k = q.k.unwrap_or(defgen_core::router::DEFAULT_EXAMPLES).min(MAX_EXAMPLES);
    let examples = state.router.examples(&word, k);
    Ok(Json(json!({ "word": word, "examples": examples })).into_response())
}

async fn health(State(state): State<AppState>) -> Json<serde_json::Value> {
    let modes: BTreeMap<&str, bool> = Mode::ALL.iter().map(|m| (m.id(), state.router.has_model(*m))).collect();
    Json(json!({ "status": "ok", "modes": modes, "feedback_records": state.store.len() }))
}

async fn admin_feedback(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({ "records": state.store.list() }))
}

pub fn app(state: AppState) -> axum::Router {
    axum::Router::new()
        .route("/api/define", post(define))
        .route("/api/feedback", post(feedback))
        .route("/api/suggestion", post(suggestion))
        .route("/api/examples", get(examples))
        .route("/api/health", get(health))
        .route("/api/admin/feedback", get(admin_feedback))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Serves until `shutdown` resolves, then drains in-flight requests.
pub async fn serve(cfg: ServiceConfig, shutdown: impl Future<Output = ()> + Send + 'static) -> anyhow::Result<()> {
    let state = tokio::task::spawn_blocking({
        let cfg = cfg.clone();
        move || config::build_state(&cfg)
    })
    .await??;
    let listener = tokio::net::TcpListener::bind(&cfg.bind).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app(state)).with_graceful_shutdown(shutdown).await?;
    Ok(())
}

/// Resolves on Ctrl-C or SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}
