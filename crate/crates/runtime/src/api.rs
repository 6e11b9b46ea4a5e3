//! HTTP surface over [`SessionManager`].
//!
//! | method | path | |
//! |---|---|---|
//! | GET | `/api/scenarios` | scenario catalog |
//! | GET, POST | `/api/sessions` | list, create |
//! | GET | `/api/sessions/{id}` | one session |
//! | POST | `/api/sessions/{id}/answer` | `{"answer": ..}` |
//! | POST | `/api/sessions/{id}/control` | `{"command": "pause" \| "resume" \| "cancel"}` |
//! | GET | `/api/sessions/{id}/events?after=N` | polling fallback |
//! | GET | `/api/sessions/{id}/stream` | server-sent events, honours `Last-Event-ID` |
//! | GET | `/api/sessions/{id}/trajectories` | trajectories rebuilt from the event log |
//! | POST | `/api/knowledge` | one document or `{"docs": [..]}` |

use std::collections::VecDeque;
use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, Query, Request, State};
use axum::http::{HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream};
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast::error::RecvError;
use tokio::sync::broadcast::Receiver;

use gui_agent::events::RunEvent;
use gui_agent::knowledge::KnowledgeDoc;

use crate::session::{Command, CreateRequest, SeqEvent, SessionError, SessionManager, Shared};

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: &'static str,
    message: String,
}

pub struct ApiError(StatusCode, &'static str, String);

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let (status, code) = match &e {
            SessionError::UnknownScenario(_) => (StatusCode::NOT_FOUND, "unknown_scenario"),
            SessionError::UnknownTask(_) => (StatusCode::NOT_FOUND, "unknown_task"),
            SessionError::UnknownSession(_) => (StatusCode::NOT_FOUND, "unknown_session"),
            SessionError::Validation(_) => (StatusCode::BAD_REQUEST, "validation_error"),
            SessionError::NoPendingQuestion => (StatusCode::CONFLICT, "no_pending_question"),
            SessionError::InvalidTransition { .. } => (StatusCode::CONFLICT, "invalid_transition"),
            SessionError::Detached(_) => (StatusCode::CONFLICT, "detached"),
            SessionError::Store(_) => (StatusCode::INTERNAL_SERVER_ERROR, "storage_error"),
        };
        Self(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(ErrorBody { error: self.1, message: self.2 })).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn bad_request(message: impl ToString) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, "validation_error", message.to_string())
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, SessionError> + Send + 'static) -> ApiResult<T> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map(Json).map_err(ApiError::from),
        Err(e) => Err(ApiError(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())),
    }
}

/// Builds the router. `token`, when set, must arrive as a bearer token on
/// every request.
pub fn router(manager: Arc<SessionManager>) -> Router {
    let token = manager.config().token.clone();
    let api = Router::new()
        .route("/api/scenarios", get(scenarios))
        .route("/api/sessions", get(list_sessions).post(create_session))
        .route("/api/sessions/{id}", get(get_session))
        .route("/api/sessions/{id}/answer", post(post_answer))
        .route("/api/sessions/{id}/control", post(control))
        .route("/api/sessions/{id}/events", get(events))
        .route("/api/sessions/{id}/stream", get(stream_events))
        .route("/api/sessions/{id}/trajectories", get(trajectories))
        .route("/api/knowledge", post(ingest_knowledge))
        .with_state(manager);
    match token {
        Some(t) => api.layer(middleware::from_fn_with_state(Arc::new(t), require_token)),
        None => api,
    }
}

async fn require_token(State(token): State<Arc<String>>, req: Request, next: Next) -> Response {
    let ok = req
        .headers()
        .get("authorization")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .is_some_and(|v| v == token.as_str());
    if ok {
        next.run(req).await
    } else {
        ApiError(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token".into()).into_response()
    }
}

async fn scenarios(State(m): State<Arc<SessionManager>>) -> impl IntoResponse {
    Json(m.catalog().summaries())
}

async fn list_sessions(State(m): State<Arc<SessionManager>>) -> impl IntoResponse {
    Json(m.list())
}

async fn create_session(
    State(m): State<Arc<SessionManager>>,
    body: Result<Json<CreateRequest>, axum::extract::rejection::JsonRejection>,
) -> Result<(StatusCode, Json<crate::session::RunSession>), ApiError> {
    let Json(req) = body.map_err(|e| bad_request(e.body_text()))?;
    let Json(s) = blocking(move || m.create(req)).await?;
    Ok((StatusCode::CREATED, Json(s)))
}

async fn get_session(State(m): State<Arc<SessionManager>>, Path(id): Path<String>) -> ApiResult<crate::session::RunSession> {
    Ok(Json(m.get(&id)?.record()))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerBody {
    pub answer: String,
}

async fn post_answer(
    State(m): State<Arc<SessionManager>>,
    Path(id): Path<String>,
    body: Result<Json<AnswerBody>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<crate::session::RunSession> {
    let Json(b) = body.map_err(|e| bad_request(e.body_text()))?;
    let s = m.get(&id)?;
    blocking(move || s.post_answer(&b.answer)).await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlBody {
    pub command: Command,
}

async fn control(
    State(m): State<Arc<SessionManager>>,
    Path(id): Path<String>,
    body: Result<Json<ControlBody>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<crate::session::RunSession> {
    let Json(b) = body.map_err(|e| bad_request(e.body_text()))?;
    let s = m.get(&id)?;
    blocking(move || s.control(b.command)).await
}

#[derive(Debug, Default, Deserialize)]
pub struct After {
    #[serde(default)]
    pub after: u64,
}

async fn events(
    State(m): State<Arc<SessionManager>>,
    Path(id): Path<String>,
    Query(q): Query<After>,
) -> ApiResult<Vec<SeqEvent>> {
    Ok(Json(m.get(&id)?.events_after(q.after)))
}

async fn trajectories(
    State(m): State<Arc<SessionManager>>,
    Path(id): Path<String>,
) -> ApiResult<Vec<gui_agent::executor::Trajectory>> {
    Ok(Json(m.get(&id)?.trajectories()))
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum IngestBody {
    Many { docs: Vec<KnowledgeDoc> },
    One(KnowledgeDoc),
}

#[derive(Debug, Serialize, Deserialize)]
pub struct IngestReply {
    pub ingested: usize,
    pub total: usize,
}

async fn ingest_knowledge(
    State(m): State<Arc<SessionManager>>,
    body: Result<Json<IngestBody>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<IngestReply> {
    let Json(b) = body.map_err(|e| bad_request(e.body_text()))?;
    let docs = match b {
        IngestBody::Many { docs } => docs,
        IngestBody::One(d) => vec![d],
    };
    let kb = Arc::clone(m.knowledge());
    let ingested = kb.ingest(docs).map_err(bad_request)?;
    if let Some(dir) = &m.config().knowledge_dir {
        kb.save_dir(dir).map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, "storage_error", e.to_string()))?;
    }
    Ok(Json(IngestReply { ingested, total: kb.len() }))
}

fn kind(event: &RunEvent) -> String {
    serde_json::to_value(event)
        .ok()
        .and_then(|v| v.get("kind").and_then(|k| k.as_str()).map(str::to_string))
        .unwrap_or_else(|| "event".into())
}

fn is_terminal_status(event: &RunEvent) -> bool {
    matches!(event, RunEvent::Status { status } if status.is_terminal())
}

struct StreamState {
    shared: Arc<Shared>,
    queue: VecDeque<SeqEvent>,
    rx: Receiver<SeqEvent>,
    last: u64,
    /// Close once the queue drains: the session is finished or has no live run.
    close: bool,
}

fn event_stream(shared: Arc<Shared>, after: u64) -> impl Stream<Item = Result<Event, Infallible>> {
    let (backlog, rx, done) = shared.subscribe_after(after);
    let st = StreamState { shared, queue: backlog.into(), rx, last: after, close: done };
    stream::unfold(st, |mut st| async move {
        loop {
            if let Some(e) = st.queue.pop_front() {
                if e.seq <= st.last {
                    continue;
                }
                st.last = e.seq;
                if is_terminal_status(&e.event) {
                    st.close = true;
                }
                let sse = Event::default()
                    .id(e.seq.to_string())
                    .event(kind(&e.event))
                    .json_data(&e)
                    .expect("events serialize");
                return Some((Ok(sse), st));
            }
            if st.close {
                return None;
            }
            match st.rx.recv().await {
                Ok(e) => st.queue.push_back(e),
                Err(RecvError::Lagged(_)) => st.queue.extend(st.shared.events_after(st.last)),
                Err(RecvError::Closed) => return None,
            }
        }
    })
}

async fn stream_events(
    State(m): State<Arc<SessionManager>>,
    Path(id): Path<String>,
    Query(q): Query<After>,
    headers: HeaderMap,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let shared = m.get(&id)?;
    let resume = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse::<u64>().ok());
    let after = resume.unwrap_or(0).max(q.after);
    Ok(Sse::new(event_stream(shared, after)).keep_alive(KeepAlive::default()))
}

pub async fn serve(manager: Arc<SessionManager>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(manager))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
