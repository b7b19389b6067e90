//! HTTP session API over a loaded embedding store.
//!
//! Sessions live in memory. Each one is mutated under its own lock, while the
//! store and the optional AFS checkpoint are shared read-only. Turns run on
//! the blocking pool and commit only on success, so a rejected feedback
//! request leaves the session untouched.
//!
//! Routes:
//!
//! | method | path                       | body / result                         |
//! |--------|----------------------------|---------------------------------------|
//! | POST   | `/sessions`                | [`CreateSession`] -> [`TurnResponse`] |
//! | POST   | `/sessions/{id}/feedback`  | `Feedback` -> [`TurnResponse`]        |
//! | GET    | `/sessions/{id}`           | [`SessionHistory`]                    |
//! | GET    | `/items/{id}`              | [`ItemView`]                          |
//! | GET    | `/healthz`                 | `{"status": "ok"}`                    |
//!
//! Errors are `{code, message}` with 400, 404, 409 or 422.

mod api;
mod error;

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::routing::{get, post};
use axum::{Json, Router};
use refrank_core::afs::AfsModel;
use refrank_core::session::{Feedback, SessionContext, SessionState};
use refrank_core::store::EmbeddingStore;
use serde_json::json;

pub use api::{CreateSession, ItemView, ResultView, SaliencyView, SessionHistory, SessionParams, TurnResponse, TurnView};
pub use error::{ApiError, ErrorBody};

#[derive(Debug, Clone)]
pub struct ApiSession {
    pub session_id: String,
    pub state: SessionState,
    pub created_at_ms: u64,
    pub updated_at_ms: u64,
}

impl ApiSession {
    pub fn history(&self, store: &EmbeddingStore) -> SessionHistory {
        let strategy = self.state.config.strategy;
        SessionHistory {
            session_id: self.session_id.clone(),
            query_id: self.state.query_id.clone(),
            config: self.state.config.clone(),
            created_at_ms: self.created_at_ms,
            updated_at_ms: self.updated_at_ms,
            feedback: self.state.feedback.clone(),
            turns: self.state.turns.iter().map(|t| TurnView::new(store, strategy, t)).collect(),
        }
    }
}

type SessionMap = HashMap<String, Arc<Mutex<ApiSession>>>;

pub struct AppState {
    pub store: Arc<EmbeddingStore>,
    pub model: Option<Arc<AfsModel>>,
    sessions: RwLock<SessionMap>,
}

impl AppState {
    pub fn new(store: EmbeddingStore, model: Option<AfsModel>) -> Arc<Self> {
        Arc::new(Self { store: Arc::new(store), model: model.map(Arc::new), sessions: RwLock::new(HashMap::new()) })
    }

    fn context(&self) -> SessionContext<'_> {
        SessionContext::new(&self.store, self.model.as_deref())
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<ApiSession>>, ApiError> {
        self.sessions
            .read()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("unknown_session", format!("no session {id:?}")))
    }

    pub fn session_count(&self) -> usize {
        self.sessions.read().expect("session map poisoned").len()
    }

    /// Histories of all sessions, oldest first.
    pub fn histories(&self) -> Vec<SessionHistory> {
        let map = self.sessions.read().expect("session map poisoned");
        let mut out: Vec<SessionHistory> =
            map.values().map(|s| s.lock().expect("session poisoned").history(&self.store)).collect();
        out.sort_by(|a, b| (a.created_at_ms, &a.session_id).cmp(&(b.created_at_ms, &b.session_id)));
        out
    }
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    payload.map(|Json(v)| v).map_err(|e| ApiError::bad_request(e.body_text()))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(axum::http::StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    payload: Result<Json<CreateSession>, JsonRejection>,
) -> Result<Json<TurnResponse>, ApiError> {
    let req = body(payload)?;
    let query_id = match (req.query_id, req.caption_id) {
        (Some(q), Some(c)) if q != c => return Err(ApiError::bad_request("query_id and caption_id disagree")),
        (Some(q), _) | (None, Some(q)) => q,
        (None, None) => return Err(ApiError::bad_request("query_id or caption_id is required")),
    };
    let config = req.params.apply(req.strategy);
    let worker = app.clone();
    let session = blocking(move || {
        let ctx = worker.context();
        let mut state = SessionState::new(&ctx, &query_id, config)?;
        state.run_turn(&ctx)?;
        let t = now_ms();
        Ok(ApiSession { session_id: uuid::Uuid::new_v4().simple().to_string(), state, created_at_ms: t, updated_at_ms: t })
    })
    .await?;
    let strategy = session.state.config.strategy;
    let response = TurnResponse {
        session_id: session.session_id.clone(),
        turn: TurnView::new(&app.store, strategy, session.state.last_turn().expect("first turn ran")),
    };
    log::info!("session {} created for {} ({strategy})", session.session_id, session.state.query_id);
    app.sessions.write().expect("session map poisoned").insert(session.session_id.clone(), Arc::new(Mutex::new(session)));
    Ok(Json(response))
}

async fn post_feedback(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    payload: Result<Json<Feedback>, JsonRejection>,
) -> Result<Json<TurnResponse>, ApiError> {
    let session = app.session(&id)?;
    let feedback = body(payload)?;
    let worker = app.clone();
    blocking(move || {
        let mut guard = session.lock().expect("session poisoned");
        let ctx = worker.context();
        let mut next = guard.state.clone();
        next.run_turn_with(&ctx, &feedback)?;
        guard.state = next;
        guard.updated_at_ms = now_ms();
        let strategy = guard.state.config.strategy;
        Ok(Json(TurnResponse {
            session_id: guard.session_id.clone(),
            turn: TurnView::new(&worker.store, strategy, guard.state.last_turn().expect("turn ran")),
        }))
    })
    .await
}

async fn get_session(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<SessionHistory>, ApiError> {
    let session = app.session(&id)?;
    let guard = session.lock().expect("session poisoned");
    Ok(Json(guard.history(&app.store)))
}

async fn get_item(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<ItemView>, ApiError> {
    let idx = app.store.item_index(&id).ok_or_else(|| ApiError::not_found("unknown_item", format!("no item {id:?}")))?;
    Ok(Json(ItemView::from(&app.store.items[idx])))
}

async fn healthz() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/feedback", post(post_feedback))
        .route("/items/{id}", get(get_item))
        .route("/healthz", get(healthz))
        .with_state(state)
}

/// Writes every session history as one JSON array.
pub fn flush_sessions(state: &AppState, path: &Path) -> std::io::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let text = serde_json::to_string_pretty(&state.histories()).map_err(std::io::Error::other)?;
    std::fs::write(path, text)
}

/// Resolves on SIGTERM or Ctrl-C.
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
            Err(e) => {
                log::warn!("cannot install SIGTERM handler: {e}");
                std::future::pending::<()>().await
            }
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}

/// Serves until `shutdown` resolves, then flushes sessions to `session_log`.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
    session_log: Option<&Path>,
) -> std::io::Result<()> {
    axum::serve(listener, router(state.clone())).with_graceful_shutdown(shutdown).await?;
    if let Some(path) = session_log {
        flush_sessions(&state, path)?;
        log::info!("flushed {} sessions to {}", state.session_count(), path.display());
    }
    Ok(())
}
