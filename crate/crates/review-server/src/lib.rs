//! HTTP front end for QC review sessions.
//!
//! | method | path                        | body                                   |
//! |--------|-----------------------------|----------------------------------------|
//! | POST   | `/sessions`                 | detector, seed, plan or plan inputs    |
//! | GET    | `/sessions`                 |                                        |
//! | GET    | `/sessions/{id}`            |                                        |
//! | GET    | `/sessions/{id}/next`       |                                        |
//! | POST   | `/sessions/{id}/verdicts`   | `{detection_id, judgement}`            |
//! | POST   | `/sessions/{id}/fn-marks`   | `{frame_id, boxes: [[x, y, w, h]]}`    |
//! | GET    | `/sessions/{id}/progress`   |                                        |
//! | GET    | `/sessions/{id}/report`     |                                        |
//! | GET    | `/frames/{id}/image`        |                                        |
//!
//! Bodies are JSON. Status codes: 200 ok, 400 malformed or rejected input,
//! 404 unknown id, 409 cursor conflict.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;
use tracing::{info, warn};

use weaklabel_core::qc_stats::{self, QcPlan};
use weaklabel_core::review::{
    Judgement, NextItem, Progress, ReviewDesk, ReviewError, SessionRecord, SessionReport, SessionRequest, SessionScope,
    SessionState,
};
use weaklabel_core::BBox;

#[derive(Debug, Clone)]
pub struct ServerOptions {
    /// Base for relative frame image paths.
    pub image_root: PathBuf,
    /// Served for any path the API does not claim, e.g. a built review UI.
    pub static_dir: Option<PathBuf>,
}

impl Default for ServerOptions {
    fn default() -> Self {
        Self {
            image_root: PathBuf::from("."),
            static_dir: None,
        }
    }
}

#[derive(Clone)]
struct AppState {
    desk: Arc<ReviewDesk>,
    image_root: Arc<PathBuf>,
}

pub fn router(desk: ReviewDesk, opts: ServerOptions) -> Router {
    let state = AppState {
        desk: Arc::new(desk),
        image_root: Arc::new(opts.image_root),
    };
    let api = Router::new()
        .route("/sessions", post(open_session).get(list_sessions))
        .route("/sessions/{id}", get(session))
        .route("/sessions/{id}/next", get(next_item))
        .route("/sessions/{id}/verdicts", post(submit_verdict))
        .route("/sessions/{id}/fn-marks", post(submit_fn_marks))
        .route("/sessions/{id}/progress", get(progress))
        .route("/sessions/{id}/report", get(report))
        .route("/frames/{id}/image", get(frame_image))
        .with_state(state);
    match opts.static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serves until ctrl-c.
pub async fn serve(listener: tokio::net::TcpListener, app: Router) -> std::io::Result<()> {
    info!(addr = %listener.local_addr()?, "review service listening");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(ErrorBody { error: self.1 })).into_response()
    }
}

impl From<ReviewError> for ApiError {
    fn from(e: ReviewError) -> Self {
        let status = match &e {
            ReviewError::NotFound { .. } => StatusCode::NOT_FOUND,
            ReviewError::Conflict(_) => StatusCode::CONFLICT,
            ReviewError::OutOfSample(_)
            | ReviewError::Insufficient { .. }
            | ReviewError::InvalidBox(_)
            | ReviewError::Invalid(_)
            | ReviewError::Qc(_) => StatusCode::BAD_REQUEST,
            ReviewError::Store(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

fn malformed(e: JsonRejection) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, e.body_text())
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Runs a desk call off the async workers; the store syncs to disk.
async fn blocking<T: Send + 'static>(
    state: &AppState,
    f: impl FnOnce(&ReviewDesk) -> Result<T, ReviewError> + Send + 'static,
) -> Result<T, ApiError> {
    let desk = state.desk.clone();
    tokio::task::spawn_blocking(move || f(&desk))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(ApiError::from)
}

/// `POST /sessions`. Either a full `plan` or the three plan inputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpenSessionBody {
    pub detector_id: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scope: Option<SessionScope>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<QcPlan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pilot_p_hat: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

impl OpenSessionBody {
    fn plan(&self) -> Result<QcPlan, ApiError> {
        let bad = |m: String| ApiError(StatusCode::BAD_REQUEST, m);
        match (&self.plan, self.pilot_p_hat, self.epsilon, self.confidence) {
            (Some(p), None, None, None) => {
                if p.required_n == 0 || !(p.confidence > 0.0 && p.confidence < 1.0) {
                    return Err(bad("plan needs required_n >= 1 and confidence in (0, 1)".into()));
                }
                Ok(p.clone())
            }
            (None, Some(p), Some(e), Some(c)) => qc_stats::required_sample_size(p, e, c).map_err(|e| bad(e.to_string())),
            _ => Err(bad("give either `plan` or all of `pilot_p_hat`, `epsilon`, `confidence`".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub detector_id: String,
    pub scope: SessionScope,
    pub seed: u64,
    pub plan: QcPlan,
    pub sample_size: usize,
    pub frame_count: usize,
    pub cursor: usize,
    pub state: SessionState,
}

/// `GET /sessions/{id}`: the summary plus judging order and frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionDetail {
    #[serde(flatten)]
    pub summary: SessionSummary,
    pub sample: Vec<String>,
    pub frames: Vec<String>,
}

fn summary(desk: &ReviewDesk, record: &SessionRecord) -> Result<SessionSummary, ReviewError> {
    let s = desk.session(&record.session_id)?;
    Ok(SessionSummary {
        session_id: record.session_id.clone(),
        detector_id: record.detector_id.clone(),
        scope: record.scope,
        seed: record.seed,
        plan: record.plan.clone(),
        sample_size: record.sample.len(),
        frame_count: record.frames.len(),
        cursor: s.cursor,
        state: s.state,
    })
}

async fn open_session(
    State(st): State<AppState>,
    body: Result<Json<OpenSessionBody>, JsonRejection>,
) -> ApiResult<SessionSummary> {
    let Json(body) = body.map_err(malformed)?;
    let plan = body.plan()?;
    let req = SessionRequest {
        plan,
        detector_id: body.detector_id,
        seed: body.seed,
        scope: body.scope.unwrap_or(SessionScope::Detections),
        session_id: body.session_id,
    };
    let out = blocking(&st, move |desk| {
        let s = desk.open(req)?;
        summary(desk, &s.record)
    })
    .await?;
    info!(session = %out.session_id, n = out.sample_size, "session opened");
    Ok(Json(out))
}

async fn list_sessions(State(st): State<AppState>) -> ApiResult<Vec<SessionSummary>> {
    blocking(&st, |desk| desk.sessions().iter().map(|r| summary(desk, r)).collect())
        .await
        .map(Json)
}

async fn session(State(st): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<SessionDetail> {
    blocking(&st, move |desk| {
        let s = desk.session(&id)?;
        Ok(SessionDetail {
            summary: summary(desk, &s.record)?,
            sample: s.record.sample,
            frames: s.record.frames,
        })
    })
    .await
    .map(Json)
}

async fn next_item(State(st): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<NextItem> {
    blocking(&st, move |desk| desk.next_item(&id)).await.map(Json)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerdictBody {
    pub detection_id: String,
    pub judgement: Judgement,
    #[serde(default = "default_annotator")]
    pub annotator: String,
}

fn default_annotator() -> String {
    "anonymous".into()
}

async fn submit_verdict(
    State(st): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<VerdictBody>, JsonRejection>,
) -> ApiResult<Progress> {
    let Json(v) = body.map_err(malformed)?;
    blocking(&st, move |desk| desk.submit_verdict(&id, &v.detection_id, v.judgement, &v.annotator))
        .await
        .map(Json)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FnMarksBody {
    pub frame_id: String,
    #[serde(default)]
    pub boxes: Vec<[f64; 4]>,
    #[serde(default = "default_annotator")]
    pub annotator: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FnMarksReply {
    pub count: usize,
    pub progress: Progress,
}

async fn submit_fn_marks(
    State(st): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<FnMarksBody>, JsonRejection>,
) -> ApiResult<FnMarksReply> {
    let Json(m) = body.map_err(malformed)?;
    let boxes: Vec<BBox> = m.boxes.iter().map(|b| BBox::from(*b)).collect();
    blocking(&st, move |desk| {
        let count = desk.submit_fn_marks(&id, &m.frame_id, &boxes, &m.annotator)?;
        Ok(FnMarksReply {
            count,
            progress: desk.progress(&id)?,
        })
    })
    .await
    .map(Json)
}

async fn progress(State(st): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Progress> {
    blocking(&st, move |desk| desk.progress(&id)).await.map(Json)
}

async fn report(State(st): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<SessionReport> {
    blocking(&st, move |desk| desk.report(&id)).await.map(Json)
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("pgm" | "pnm") => "image/x-portable-graymap",
        _ => "application/octet-stream",
    }
}

async fn frame_image(State(st): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let frame = blocking(&st, move |desk| {
        desk.store().frame(&id).ok_or(ReviewError::NotFound { what: "frame", id })
    })
    .await?;
    let path = st.image_root.join(&frame.image_path);
    match tokio::fs::read(&path).await {
        Ok(bytes) => Ok(([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response()),
        Err(e) => {
            warn!(frame = %frame.frame_id, path = %path.display(), error = %e, "frame image unreadable");
            Err(ApiError(
                StatusCode::NOT_FOUND,
                format!("image for frame {:?} is not available", frame.frame_id),
            ))
        }
    }
}
