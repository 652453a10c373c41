//! HTTP API for live sessions. Each mutating call runs on the blocking pool
//! under its session's lock, so calls for one session are serialized while
//! different sessions proceed in parallel.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dir_tir_core::{
    CandidateSet, Engine, Error, ImageHandle, ImageId, SessionMode, SessionState, SessionStatus,
    DISCREPANCY_QUESTION,
};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tracing::{info, warn};

/// Seconds a client should wait after a 503.
pub const RETRY_AFTER_S: u64 = 5;

type Slot = Arc<Mutex<Option<SessionState>>>;

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    engine: Engine,
    token: Option<String>,
    sessions: Mutex<HashMap<String, Slot>>,
    conflicts: AtomicU64,
}

impl AppState {
    /// The engine must have a session store; sessions are loaded from it on demand.
    pub fn new(engine: Engine, token: Option<String>) -> Self {
        assert!(engine.store().is_some(), "service engine needs a session store");
        AppState {
            inner: Arc::new(Inner {
                engine,
                token,
                sessions: Mutex::new(HashMap::new()),
                conflicts: AtomicU64::new(0),
            }),
        }
    }

    pub fn engine(&self) -> &Engine {
        &self.inner.engine
    }

    /// Number of 409 responses served so far.
    pub fn conflicts(&self) -> u64 {
        self.inner.conflicts.load(Ordering::SeqCst)
    }

    fn slot(&self, id: &str) -> Slot {
        let mut map = self.inner.sessions.lock().unwrap();
        map.entry(id.to_string()).or_default().clone()
    }

    /// Runs `f` on the session under its lock, loading it from the store first if needed.
    fn with_session<R>(
        &self,
        id: &str,
        f: impl FnOnce(&Engine, &mut SessionState) -> dir_tir_core::Result<R>,
    ) -> dir_tir_core::Result<R> {
        let slot = self.slot(id);
        let mut guard = slot.lock().unwrap_or_else(|p| p.into_inner());
        if guard.is_none() {
            let store = self.inner.engine.store().expect("checked in new");
            *guard = Some(store.load(id)?);
        }
        let s = guard.as_mut().unwrap();
        if s.mode != SessionMode::Live {
            return Err(Error::NotFound(id.to_string()));
        }
        f(&self.inner.engine, s)
    }
}

/// Error body: `{"error": code, "message": text}`.
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
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, code) = match &e {
            Error::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            Error::WrongPhase(_) => (StatusCode::CONFLICT, "wrong_phase"),
            Error::SessionComplete => (StatusCode::GONE, "session_finished"),
            Error::EmptyDescription
            | Error::EmptyResponse(_)
            | Error::InvalidParams(_)
            | Error::UnknownTarget(_) => (StatusCode::BAD_REQUEST, "bad_request"),
            Error::Oracle(_) => (StatusCode::SERVICE_UNAVAILABLE, "oracle_unavailable"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut resp = (
            self.status,
            Json(json!({ "error": self.code, "message": self.message })),
        )
            .into_response();
        if self.status == StatusCode::SERVICE_UNAVAILABLE {
            resp.headers_mut()
                .insert(header::RETRY_AFTER, HeaderValue::from(RETRY_AFTER_S));
        }
        resp
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: ImageId,
    pub provenance: dir_tir_core::Provenance,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub handle: String,
    pub url: String,
    /// Always `ready`: generation completes before the response is sent.
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StartBody {
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextBody {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectBody {
    pub image_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StartResponse {
    pub session_id: String,
    pub question: String,
    pub round: usize,
    pub status: SessionStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerResponse {
    pub round: usize,
    pub generated_image_ref: ImageRef,
    pub discrepancy_question: String,
    pub candidates: Vec<Candidate>,
    pub status: SessionStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscrepancyResponse {
    pub round: usize,
    pub candidates: Vec<Candidate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next_question: Option<String>,
    pub finished: bool,
    pub status: SessionStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidatesResponse {
    pub round: usize,
    pub candidates: Vec<Candidate>,
}

fn candidates(engine: &Engine, c: &CandidateSet) -> Vec<Candidate> {
    let g = engine.gallery();
    c.ids
        .iter()
        .zip(&c.provenance)
        .map(|(id, &provenance)| Candidate {
            id: id.clone(),
            provenance,
            caption: g
                .index_of(id)
                .map(|i| g.entry(i).caption.clone())
                .unwrap_or_default(),
        })
        .collect()
}

/// Percent-encodes everything but unreserved URL characters.
fn path_segment(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for b in s.bytes() {
        if b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.' | b'~') {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

fn image_ref(handle: &ImageHandle) -> ImageRef {
    ImageRef {
        handle: handle.as_str().to_string(),
        url: format!("/images/{}", path_segment(handle.as_str())),
        status: "ready".into(),
    }
}

async fn blocking<R: Send + 'static>(
    f: impl FnOnce() -> dir_tir_core::Result<R> + Send + 'static,
) -> ApiResult<R> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError::from),
        Err(e) => Err(ApiError::new(
            StatusCode::INTERNAL_SERVER_ERROR,
            "internal",
            e.to_string(),
        )),
    }
}

fn session_id() -> String {
    use std::time::{SystemTime, UNIX_EPOCH};
    static SEQ: AtomicU64 = AtomicU64::new(0);
    let t = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0);
    let n = SEQ.fetch_add(1, Ordering::SeqCst);
    format!("s{:x}{:04x}", t as u64, n & 0xffff)
}

async fn start(
    State(app): State<AppState>,
    body: Result<Json<StartBody>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<StartResponse>)> {
    let Json(body) = body?;
    let resp = blocking(move || {
        let id = session_id();
        let engine = app.engine();
        let mut s = engine.open_session_as(
            &id,
            &body.description,
            SessionMode::Live,
            None,
            engine.settings().generator_seed,
        )?;
        let pending = match engine.pose_question(&mut s) {
            Ok(p) => p,
            Err(e) => {
                // a session that never got its first question is not kept
                if let Some(store) = engine.store() {
                    let _ = store.remove(&id);
                }
                return Err(e);
            }
        };
        info!(session = %id, "session opened");
        let resp = StartResponse {
            session_id: id.clone(),
            question: pending.question,
            round: pending.k,
            status: s.status,
        };
        *app.slot(&id).lock().unwrap() = Some(s);
        Ok(resp)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(resp)))
}

async fn answer(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<TextBody>, JsonRejection>,
) -> ApiResult<Json<AnswerResponse>> {
    let Json(body) = body?;
    let resp = blocking(move || {
        app.with_session(&id, |engine, s| {
            let step = engine.submit_answer(s, &body.text)?;
            Ok(AnswerResponse {
                round: s.pending.as_ref().map(|p| p.k).unwrap_or(s.turns.len()),
                generated_image_ref: image_ref(&step.generated.handle),
                discrepancy_question: DISCREPANCY_QUESTION.to_string(),
                candidates: candidates(engine, &step.candidates),
                status: s.status,
            })
        })
    })
    .await?;
    Ok(Json(resp))
}

async fn discrepancy(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<TextBody>, JsonRejection>,
) -> ApiResult<Json<DiscrepancyResponse>> {
    let Json(body) = body?;
    let resp = blocking(move || {
        app.with_session(&id, |engine, s| {
            let step = engine.submit_discrepancy(s, &body.text)?;
            Ok(DiscrepancyResponse {
                round: step.record.k,
                candidates: candidates(engine, &step.record.candidates),
                finished: step.next_question.is_none(),
                next_question: step.next_question,
                status: s.status,
            })
        })
    })
    .await?;
    Ok(Json(resp))
}

async fn select(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<SelectBody>, JsonRejection>,
) -> ApiResult<Json<serde_json::Value>> {
    let Json(body) = body?;
    let resp = blocking(move || {
        app.with_session(&id, |engine, s| {
            engine.select_candidate(s, &ImageId::new(body.image_id))?;
            Ok(json!({ "selected": s.selected, "finished": true, "status": s.status }))
        })
    })
    .await?;
    Ok(Json(resp))
}

async fn transcript(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    let resp = blocking(move || {
        app.with_session(&id, |_, s| {
            Ok(json!({
                "session_id": s.session_id,
                "status": s.status,
                "round": s.turns.len(),
                "round_cap": s.round_cap,
                "description": s.description,
                "prompt": s.prompt,
                "pending_question": s.pending.as_ref().map(|p| &p.question),
                "selected": s.selected,
                "turns": s.turns.iter().map(|t| json!({
                    "k": t.k,
                    "question": t.q0.question,
                    "answer": t.q0.answer,
                    "generated_image_ref": image_ref(&t.generated.handle),
                    "discrepancy_question": t.q1.question,
                    "discrepancy_answer": t.q1.answer,
                    "description": t.description.text,
                    "prompt": t.prompt.text,
                    "question_flagged": t.question_flagged,
                    "candidates": t.candidates.ids,
                })).collect::<Vec<_>>(),
            }))
        })
    })
    .await?;
    Ok(Json(resp))
}

async fn latest_candidates(
    State(app): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<Json<CandidatesResponse>> {
    let resp = blocking(move || {
        app.with_session(&id, |engine, s| {
            let round = s
                .pending
                .as_ref()
                .filter(|p| p.answer.is_some())
                .map(|p| p.k)
                .unwrap_or(s.turns.len());
            Ok(s.latest_candidates().map(|c| CandidatesResponse {
                round,
                candidates: candidates(engine, c),
            }))
        })
    })
    .await?;
    resp.map(Json).ok_or_else(|| {
        ApiError::new(StatusCode::CONFLICT, "no_candidates_yet", "no round has produced candidates yet")
    })
}

fn sniff(bytes: &[u8]) -> &'static str {
    let head = &bytes[..bytes.len().min(256)];
    if head.starts_with(b"\x89PNG") {
        "image/png"
    } else if head.starts_with(&[0xff, 0xd8, 0xff]) {
        "image/jpeg"
    } else if head.starts_with(b"RIFF") && head.get(8..12) == Some(b"WEBP") {
        "image/webp"
    } else if std::str::from_utf8(head).is_ok_and(|s| s.contains("<svg")) {
        "image/svg+xml"
    } else {
        "application/octet-stream"
    }
}

async fn image(State(app): State<AppState>, Path(handle): Path<String>) -> ApiResult<Response> {
    let bytes = blocking(move || {
        Ok(app
            .engine()
            .oracles()
            .image_generator
            .image_bytes(&ImageHandle(handle)))
    })
    .await?
    .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", "unknown image handle"))?;
    Ok(([(header::CONTENT_TYPE, sniff(&bytes))], bytes).into_response())
}

async fn stats(State(app): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({ "conflicts": app.conflicts() }))
}

async fn guard(State(app): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &app.inner.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong token")
                .into_response();
        }
    }
    let resp = next.run(req).await;
    if resp.status() == StatusCode::CONFLICT {
        app.inner.conflicts.fetch_add(1, Ordering::SeqCst);
    }
    if resp.status().is_server_error() {
        warn!(status = %resp.status(), "request failed");
    }
    resp
}

pub fn api_router(app: AppState) -> Router {
    Router::new()
        .route("/sessions", post(start))
        .route("/sessions/{id}", get(transcript))
        .route("/sessions/{id}/answer", post(answer))
        .route("/sessions/{id}/discrepancy", post(discrepancy))
        .route("/sessions/{id}/select", post(select))
        .route("/sessions/{id}/candidates", get(latest_candidates))
        .route("/images/{handle}", get(image))
        .route("/stats", get(stats))
        .route_layer(middleware::from_fn_with_state(app.clone(), guard))
        .route("/health", get(|| async { Json(json!({ "ok": true })) }))
        .with_state(app)
}
