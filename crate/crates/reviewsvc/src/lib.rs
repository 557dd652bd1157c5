//! HTTP/JSON service over a [`ReviewStore`].
//!
//! All writes go through one lock-held writer; reads take a shared lock.

use std::future::Future;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use hic_core::review::{Assessment, FieldError, ReviewError, ReviewStore};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use tokio::net::TcpListener;
use tower_http::services::ServeDir;

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("server error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Store(#[from] ReviewError),
}

pub struct AppState {
    store: RwLock<ReviewStore>,
    asset_root: PathBuf,
}

impl AppState {
    pub fn new(store: ReviewStore, asset_root: impl Into<PathBuf>) -> Arc<Self> {
        Arc::new(AppState {
            store: RwLock::new(store),
            asset_root: asset_root.into(),
        })
    }

    pub fn flush(&self) -> Result<(), ReviewError> {
        self.store.write().expect("store lock").flush()
    }
}

type Shared = Arc<AppState>;

const FALLBACK_INDEX: &str = "<!doctype html>\n<html><head><meta charset=\"utf-8\"><title>hic review</title></head>\
<body><h1>hic review service</h1><p>No UI bundle mounted. The JSON API lives under <code>/api</code>.</p></body></html>\n";

/// Routes under `/api`, image files under `/assets`, and the UI bundle
/// (if any) at `/`.
pub fn router(state: Shared, ui_dir: Option<PathBuf>) -> Router {
    let assets = ServeDir::new(&state.asset_root);
    let api = Router::new()
        .route("/api/health", get(health))
        .route("/api/sessions", get(list_sessions))
        .route("/api/sessions/{id}", get(get_session))
        .route("/api/sessions/{id}/images", get(session_images))
        .route("/api/sessions/{id}/assessments", get(session_assessments))
        .route("/api/sessions/{id}/tally", get(session_tally))
        .route("/api/tally", get(tally_query))
        .route("/api/assessments", post(post_assessment))
        .nest_service("/assets", assets)
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(|| async { Html(FALLBACK_INDEX) })),
    }
}

fn not_found(what: String) -> Response {
    (StatusCode::NOT_FOUND, Json(json!({ "error": what }))).into_response()
}

fn field_errors(errors: Vec<FieldError>) -> Response {
    (StatusCode::BAD_REQUEST, Json(json!({ "errors": errors }))).into_response()
}

fn internal(e: impl std::fmt::Display) -> Response {
    (StatusCode::INTERNAL_SERVER_ERROR, Json(json!({ "error": e.to_string() }))).into_response()
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "version": hic_core::TOOL_VERSION }))
}

async fn list_sessions(State(st): State<Shared>) -> Response {
    let store = st.store.read().expect("store lock");
    Json(store.sessions().cloned().collect::<Vec<_>>()).into_response()
}

async fn get_session(State(st): State<Shared>, Path(id): Path<String>) -> Response {
    let store = st.store.read().expect("store lock");
    match store.session(&id) {
        Some(s) => Json(s.clone()).into_response(),
        None => not_found(format!("unknown session `{id}`")),
    }
}

#[derive(Serialize)]
struct ImageView<'a> {
    image_id: &'a str,
    original: String,
    overlay_a: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    overlay_b: Option<String>,
}

fn asset_url(p: &str) -> String {
    format!("/assets/{}", p.trim_start_matches('/'))
}

async fn session_images(State(st): State<Shared>, Path(id): Path<String>) -> Response {
    let store = st.store.read().expect("store lock");
    let Some(s) = store.session(&id) else {
        return not_found(format!("unknown session `{id}`"));
    };
    let images: Vec<ImageView> = s
        .images
        .iter()
        .map(|i| ImageView {
            image_id: &i.image_id,
            original: asset_url(&i.original),
            overlay_a: asset_url(&i.overlay_a),
            overlay_b: i.overlay_b.as_deref().map(asset_url),
        })
        .collect();
    Json(images).into_response()
}

async fn session_assessments(State(st): State<Shared>, Path(id): Path<String>) -> Response {
    let store = st.store.read().expect("store lock");
    if store.session(&id).is_none() {
        return not_found(format!("unknown session `{id}`"));
    }
    let entries: Vec<_> = store.log().iter().filter(|e| e.assessment.session_id == id).collect();
    Json(entries).into_response()
}

fn tally_response(st: &AppState, id: &str) -> Response {
    let store = st.store.read().expect("store lock");
    match store.tally(id) {
        Ok(t) => Json(t).into_response(),
        Err(ReviewError::UnknownSession(_)) => not_found(format!("unknown session `{id}`")),
        Err(e) => internal(e),
    }
}

async fn session_tally(State(st): State<Shared>, Path(id): Path<String>) -> Response {
    tally_response(&st, &id)
}

#[derive(Deserialize)]
struct TallyQuery {
    session: String,
}

async fn tally_query(State(st): State<Shared>, Query(q): Query<TallyQuery>) -> Response {
    tally_response(&st, &q.session)
}

/// Current UTC time, RFC 3339 with milliseconds.
pub fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

async fn post_assessment(State(st): State<Shared>, body: Bytes) -> Response {
    let value: serde_json::Value = match serde_json::from_slice(&body) {
        Ok(v) => v,
        Err(e) => {
            return field_errors(vec![FieldError {
                field: String::new(),
                message: format!("malformed JSON: {e}"),
            }])
        }
    };
    let mut a: Assessment = match Assessment::from_json(&value) {
        Ok(a) => a,
        Err(errs) => return field_errors(errs),
    };
    if a.timestamp.is_empty() {
        a.timestamp = now_rfc3339();
    }
    let mut store = st.store.write().expect("store lock");
    match store.record(a) {
        Ok(rev) => (StatusCode::CREATED, Json(rev)).into_response(),
        Err(ReviewError::Invalid(errs)) => field_errors(errs),
        Err(ReviewError::UnknownSession(id)) => not_found(format!("unknown session `{id}`")),
        Err(e) => internal(e),
    }
}

/// Binds a listener, reporting an occupied port as [`ServeError::Bind`].
pub async fn bind(addr: SocketAddr) -> Result<TcpListener, ServeError> {
    TcpListener::bind(addr).await.map_err(|source| ServeError::Bind { addr, source })
}

/// Serves until `shutdown` resolves, then flushes the log.
pub async fn serve(
    listener: TcpListener,
    state: Shared,
    ui_dir: Option<PathBuf>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServeError> {
    let app = router(state.clone(), ui_dir);
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await?;
    state.flush()?;
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
