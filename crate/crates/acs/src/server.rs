//! `/v1` HTTP/JSON API over [`Session`]s.
//!
//! | method | path | body |
//! |---|---|---|
//! | POST | `/v1/sessions` | [`SessionSpec`] |
//! | GET | `/v1/sessions/{id}` | |
//! | POST | `/v1/sessions/{id}/advance` | `{"steps": n}` |
//! | POST | `/v1/sessions/{id}/policy` | [`PolicyPatch`] |
//! | POST | `/v1/sessions/{id}/labels` | `{"handle": "..", "y": v}` |
//! | POST | `/v1/sessions/{id}/preview` | [`PreviewRequest`] |
//! | POST | `/v1/sessions/{id}/finalize` | |
//! | GET | `/v1/sessions/{id}/events` | |
//! | POST | `/v1/replay` | `{"spec": .., "events": [..]}` |
//!
//! Errors are `{"error": msg}` with 404 for unknown sessions, 409 for
//! conflicts (including a mutation already in flight) and 422 for invalid
//! input.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};

use acs_core::engine::Handle;
use acs_core::result::SelectionResult;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use crate::session::{
    fresh_id, PolicyPatch, PreviewOrdering, PreviewRequest, Session, SessionError, SessionEvent, SessionSpec, StateSnapshot,
};

/// Service defaults, loadable from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub bind: String,
    pub max_sessions: usize,
    /// Upper bound on `steps` per advance request.
    pub max_steps_per_request: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { bind: "127.0.0.1:8080".into(), max_sessions: 1024, max_steps_per_request: 100_000 }
    }
}

impl ServiceConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        Ok(toml::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown session {id}"))
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let status = match e {
            SessionError::Conflict(_) => StatusCode::CONFLICT,
            SessionError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
        };
        Self::new(status, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

struct Entry {
    /// Single writer: mutations take this with `try_lock`.
    session: Mutex<Session>,
    /// Last published state, served to readers without blocking writers.
    snapshot: RwLock<Arc<StateSnapshot>>,
}

pub struct Service {
    config: ServiceConfig,
    sessions: RwLock<HashMap<String, Arc<Entry>>>,
}

impl Service {
    pub fn new(config: ServiceConfig) -> Arc<Self> {
        Arc::new(Self { config, sessions: RwLock::new(HashMap::new()) })
    }

    fn entry(&self, id: &str) -> Result<Arc<Entry>, ApiError> {
        self.sessions.read().expect("session map poisoned").get(id).cloned().ok_or_else(|| ApiError::not_found(id))
    }

    /// Runs `op` on the session off the async runtime; 409 if another
    /// mutation holds it.
    async fn mutate<T: Send + 'static>(
        &self,
        id: &str,
        op: impl FnOnce(&mut Session) -> Result<T, SessionError> + Send + 'static,
    ) -> Result<(T, Arc<StateSnapshot>), ApiError> {
        let entry = self.entry(id)?;
        tokio::task::spawn_blocking(move || {
            let mut session = entry
                .session
                .try_lock()
                .map_err(|_| ApiError::new(StatusCode::CONFLICT, "another mutation of this session is in progress"))?;
            let out = op(&mut session);
            let snap = Arc::new(session.snapshot());
            *entry.snapshot.write().expect("snapshot poisoned") = snap.clone();
            Ok((out?, snap))
        })
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
    }
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/v1/health", get(|| async { Json(serde_json::json!({ "status": "ok" })) }))
        .route("/v1/sessions", post(create))
        .route("/v1/sessions/{id}", get(state))
        .route("/v1/sessions/{id}/advance", post(advance))
        .route("/v1/sessions/{id}/policy", post(policy))
        .route("/v1/sessions/{id}/labels", post(label))
        .route("/v1/sessions/{id}/preview", post(preview))
        .route("/v1/sessions/{id}/finalize", post(finalize))
        .route("/v1/sessions/{id}/events", get(events))
        .route("/v1/replay", post(replay))
        .with_state(service)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub id: String,
    pub state: StateSnapshot,
}

async fn create(State(svc): State<Arc<Service>>, body: Result<Json<SessionSpec>, JsonRejection>) -> Result<(StatusCode, Json<Created>), ApiError> {
    let Json(spec) = body?;
    if svc.sessions.read().expect("session map poisoned").len() >= svc.config.max_sessions {
        return Err(ApiError::new(StatusCode::CONFLICT, "session limit reached"));
    }
    let session = tokio::task::spawn_blocking(move || Session::create(fresh_id(), spec))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    let id = session.id().to_string();
    let snap = session.snapshot();
    let entry = Arc::new(Entry { snapshot: RwLock::new(Arc::new(snap.clone())), session: Mutex::new(session) });
    svc.sessions.write().expect("session map poisoned").insert(id.clone(), entry);
    Ok((StatusCode::CREATED, Json(Created { id, state: snap })))
}

async fn state(State(svc): State<Arc<Service>>, UrlPath(id): UrlPath<String>) -> ApiResult<StateSnapshot> {
    let entry = svc.entry(&id)?;
    let snap = entry.snapshot.read().expect("snapshot poisoned").clone();
    Ok(Json((*snap).clone()))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AdvanceRequest {
    pub steps: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Advanced {
    pub performed: usize,
    pub state: StateSnapshot,
}

async fn advance(
    State(svc): State<Arc<Service>>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<AdvanceRequest>, JsonRejection>,
) -> ApiResult<Advanced> {
    let Json(req) = body?;
    if req.steps == 0 || req.steps > svc.config.max_steps_per_request {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("steps must lie in 1..={}", svc.config.max_steps_per_request),
        ));
    }
    let (performed, snap) = svc.mutate(&id, move |s| s.advance(req.steps)).await?;
    Ok(Json(Advanced { performed, state: (*snap).clone() }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PolicyChanged {
    pub policy: acs_core::policies::PolicyConfig,
    pub state: StateSnapshot,
}

async fn policy(
    State(svc): State<Arc<Service>>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<PolicyPatch>, JsonRejection>,
) -> ApiResult<PolicyChanged> {
    let Json(patch) = body?;
    let (policy, snap) = svc.mutate(&id, move |s| s.apply_policy(&patch)).await?;
    Ok(Json(PolicyChanged { policy, state: (*snap).clone() }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LabelRequest {
    pub handle: Handle,
    pub y: f64,
}

async fn label(
    State(svc): State<Arc<Service>>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<LabelRequest>, JsonRejection>,
) -> ApiResult<StateSnapshot> {
    let Json(req) = body?;
    let ((), snap) = svc.mutate(&id, move |s| s.inject_label(req.handle, req.y)).await?;
    Ok(Json((*snap).clone()))
}

async fn preview(
    State(svc): State<Arc<Service>>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<PreviewRequest>, JsonRejection>,
) -> ApiResult<Vec<PreviewOrdering>> {
    let Json(req) = body?;
    let entry = svc.entry(&id)?;
    // previews read a clone of the view; they only wait for an in-flight writer
    let out = tokio::task::spawn_blocking(move || {
        let session = entry.session.lock().expect("session poisoned");
        session.preview(&req)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(out))
}

async fn finalize(State(svc): State<Arc<Service>>, UrlPath(id): UrlPath<String>) -> ApiResult<SelectionResult> {
    let (result, _) = svc.mutate(&id, |s| s.finalize()).await?;
    Ok(Json(result))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EventLog {
    pub events: Vec<SessionEvent>,
}

async fn events(State(svc): State<Arc<Service>>, UrlPath(id): UrlPath<String>) -> ApiResult<EventLog> {
    let entry = svc.entry(&id)?;
    let events = tokio::task::spawn_blocking(move || entry.session.lock().expect("session poisoned").events().to_vec())
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(Json(EventLog { events }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ReplayRequest {
    pub spec: SessionSpec,
    pub events: Vec<SessionEvent>,
}

async fn replay(body: Result<Json<ReplayRequest>, JsonRejection>) -> ApiResult<SelectionResult> {
    let Json(req) = body?;
    let out = tokio::task::spawn_blocking(move || {
        let s = Session::replay(fresh_id(), req.spec, &req.events)?;
        s.result().cloned().ok_or_else(|| SessionError::Conflict("event log does not end in a finalized session".into()))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(out))
}

/// Serves until ctrl-c.
pub async fn serve(config: ServiceConfig) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(&config.bind).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(Service::new(config)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
