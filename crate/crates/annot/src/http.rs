//! JSON-over-HTTP front end for the ledger.

use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use avsync::datakit::Slot;

use crate::state::{Assignment, Ledger, ServiceError, TaskState};

#[derive(Clone)]
pub struct AppState {
    pub ledger: Arc<Mutex<Ledger>>,
    /// Directory holding one bundle directory per video id.
    pub media_root: PathBuf,
    pub guidelines: Arc<str>,
}

impl AppState {
    pub fn new(ledger: Ledger, media_root: impl Into<PathBuf>, guidelines: impl Into<Arc<str>>) -> AppState {
        AppState {
            ledger: Arc::new(Mutex::new(ledger)),
            media_root: media_root.into(),
            guidelines: guidelines.into(),
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/annotators", post(register))
        .route("/task", get(task))
        .route("/rating", post(rating))
        .route("/progress", get(progress))
        .route("/guidelines", get(guidelines))
        .route("/media/{video_id}/{file}", get(media))
        .with_state(state)
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError(r.status(), r.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(r: QueryRejection) -> Self {
        ApiError(r.status(), r.body_text())
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let code = match &e {
            ServiceError::UnknownAnnotator(_) | ServiceError::UnknownTask(_) => StatusCode::NOT_FOUND,
            ServiceError::ScoreOutOfRange(_) | ServiceError::InvalidTasks(_) => StatusCode::BAD_REQUEST,
            ServiceError::DuplicateSubmission { .. } => StatusCode::CONFLICT,
            ServiceError::TaskNotAssigned { .. } => StatusCode::FORBIDDEN,
            ServiceError::Store(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(code, e.to_string())
    }
}

fn lock(state: &AppState) -> std::sync::MutexGuard<'_, Ledger> {
    // A panic while holding the lock leaves the ledger consistent: every
    // mutation happens after the store append succeeds.
    state.ledger.lock().unwrap_or_else(|p| p.into_inner())
}

#[derive(Deserialize)]
struct RegisterBody {
    annotator_id: String,
}

async fn register(
    State(state): State<AppState>,
    body: Result<Json<RegisterBody>, JsonRejection>,
) -> Result<StatusCode, ApiError> {
    let Json(body) = body?;
    if body.annotator_id.trim().is_empty() {
        return Err(ApiError(StatusCode::BAD_REQUEST, "empty annotator id".into()));
    }
    Ok(if lock(&state).register(&body.annotator_id) {
        StatusCode::CREATED
    } else {
        StatusCode::OK
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MediaLinks {
    pub video_id: String,
    pub audio: String,
    pub video: String,
    pub meta: String,
}

impl MediaLinks {
    fn for_video(id: &str) -> MediaLinks {
        MediaLinks {
            video_id: id.to_string(),
            audio: format!("/media/{id}/audio.wav"),
            video: format!("/media/{id}/video.y4m"),
            meta: format!("/media/{id}/meta.json"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskView {
    pub task_id: String,
    pub revision: u32,
    pub state: TaskState,
    pub left: MediaLinks,
    pub right: MediaLinks,
}

impl From<Assignment> for TaskView {
    fn from(a: Assignment) -> Self {
        TaskView {
            left: MediaLinks::for_video(&a.left),
            right: MediaLinks::for_video(&a.right),
            task_id: a.task_id,
            revision: a.revision,
            state: a.state,
        }
    }
}

#[derive(Deserialize)]
struct TaskQuery {
    annotator: String,
}

async fn task(State(state): State<AppState>, q: Result<Query<TaskQuery>, QueryRejection>) -> Result<Response, ApiError> {
    let Query(q) = q?;
    Ok(match lock(&state).assign(&q.annotator)? {
        Some(a) => Json(TaskView::from(a)).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RatingBody {
    pub annotator_id: String,
    pub task_id: String,
    pub slot: Slot,
    pub score: i64,
}

async fn rating(State(state): State<AppState>, b: Result<Json<RatingBody>, JsonRejection>) -> Result<Response, ApiError> {
    let Json(b) = b?;
    let ack = lock(&state).submit(&b.annotator_id, &b.task_id, b.slot, b.score)?;
    Ok(Json(ack).into_response())
}

async fn progress(State(state): State<AppState>) -> Response {
    Json(lock(&state).progress()).into_response()
}

async fn guidelines(State(state): State<AppState>) -> Response {
    ([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], state.guidelines.to_string()).into_response()
}

fn safe_component(s: &str) -> bool {
    !s.is_empty() && !s.starts_with('.') && s.chars().all(|c| c.is_ascii_alphanumeric() || "_-.".contains(c))
}

async fn media(State(state): State<AppState>, Path((video_id, file)): Path<(String, String)>) -> Result<Response, ApiError> {
    let not_found = || ApiError(StatusCode::NOT_FOUND, format!("no media {video_id}/{file}"));
    if !safe_component(&video_id) || !safe_component(&file) || !lock(&state).knows_video(&video_id) {
        return Err(not_found());
    }
    let path = state.media_root.join(&video_id).join(&file);
    let bytes = tokio::task::spawn_blocking(move || std::fs::read(path))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(|_| not_found())?;
    let mime = match file.rsplit('.').next() {
        Some("wav") => "audio/wav",
        Some("json") => "application/json",
        Some("y4m") => "video/x-yuv4mpeg",
        Some("pgm") => "image/x-portable-graymap",
        _ => "application/octet-stream",
    };
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}
