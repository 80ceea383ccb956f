//! HTTP JSON API over the job service.
//!
//! Images travel as base64 PNG, masks as row-major RLE. Blocking work
//! (store writes, segmentation) runs on the blocking pool.

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::{STANDARD, STANDARD_NO_PAD, URL_SAFE_NO_PAD};
use base64::Engine;
use eraser_core::clients::SegmenterClient;
use eraser_core::panoptic::SegmentRecord;
use eraser_core::raster::{decode_png, Rgb8Image};
use eraser_core::rle::Rle;
use eraser_core::service::{EraseConfig, EraseError, JobError, JobRecord, JobService, JobStatus};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::sync::Arc;

#[derive(Clone)]
pub struct AppState {
    pub jobs: Arc<JobService>,
    pub segmenter: Arc<dyn SegmenterClient>,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/erase", post(submit))
        .route("/v1/jobs/{id}", get(job))
        .route("/v1/segments", get(segments))
        .route("/v1/healthz", get(healthz))
        .with_state(state)
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "BadRequest", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.code, "message": self.message }))).into_response()
    }
}

impl From<JobError> for ApiError {
    fn from(e: JobError) -> Self {
        let message = e.to_string();
        match e {
            JobError::NotFound(_) => Self::new(StatusCode::NOT_FOUND, "NotFound", message),
            JobError::QueueFull(_) => Self::new(StatusCode::TOO_MANY_REQUESTS, "QueueFull", message),
            JobError::Rejected(reason) => {
                let code = match reason {
                    EraseError::EmptyMask => "EmptyMask",
                    EraseError::OversizeInput { .. } => "OversizeInput",
                    EraseError::ShapeMismatch { .. } => "ShapeMismatch",
                    EraseError::InvalidConfig(_) => "InvalidConfig",
                    EraseError::StageFailure { .. } => "StageFailure",
                };
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, code, message)
            }
            JobError::Store(_) | JobError::Io(_) => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "StoreFailure", message),
        }
    }
}

/// Accepts standard or URL-safe alphabets, padded or not. A `+` that a
/// query string turned into a space is restored.
pub fn decode_base64(text: &str) -> Result<Vec<u8>, ApiError> {
    let cleaned: String = text.trim().replace(' ', "+");
    let unpadded = cleaned.trim_end_matches('=');
    let engine = if unpadded.contains(['-', '_']) { &URL_SAFE_NO_PAD } else { &STANDARD_NO_PAD };
    engine.decode(unpadded).map_err(|e| ApiError::bad_request(format!("invalid base64: {e}")))
}

fn decode_image(b64: &str) -> Result<Rgb8Image, ApiError> {
    decode_png(&decode_base64(b64)?).map_err(|e| ApiError::bad_request(format!("image is not a decodable PNG: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))?
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EraseRequest {
    pub image_b64: String,
    pub mask_rle: Rle,
    #[serde(default)]
    pub config: Option<EraseConfig>,
}

async fn submit(State(state): State<AppState>, body: Result<Json<EraseRequest>, JsonRejection>) -> Result<Response, ApiError> {
    let Json(req) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let image = decode_image(&req.image_b64)?;
    let mask = req.mask_rle.decode().map_err(|e| ApiError::bad_request(format!("mask_rle: {e}")))?;
    let config = req.config.unwrap_or_default();
    let jobs = state.jobs.clone();
    let record = blocking(move || Ok(jobs.submit(&image, &mask, config)?)).await?;
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": record.id, "status": record.status }))).into_response())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Timings {
    pub queued_ms: Option<u64>,
    pub run_ms: Option<u64>,
}

/// Job record as served: the stored record plus derived timings and, once
/// done, the result image.
#[derive(Debug, Serialize, Deserialize)]
pub struct JobView {
    #[serde(flatten)]
    pub record: JobRecord,
    pub timings: Timings,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result_b64: Option<String>,
}

async fn job(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<JobView>, ApiError> {
    let jobs = state.jobs.clone();
    blocking(move || {
        let record = jobs.get(&id)?;
        let result_b64 = match record.status {
            JobStatus::Done => jobs.result_png(&id)?.map(|png| STANDARD.encode(png)),
            _ => None,
        };
        let timings = Timings {
            queued_ms: record.started_ms.map(|s| s.saturating_sub(record.submitted_ms)),
            run_ms: record.started_ms.zip(record.finished_ms).map(|(s, f)| f.saturating_sub(s)),
        };
        Ok(Json(JobView { record, timings, result_b64 }))
    })
    .await
}

#[derive(Debug, Deserialize)]
struct SegmentsQuery {
    image: Option<String>,
}

/// Panoptic scene as served to the mask editor.
#[derive(Debug, Serialize, Deserialize)]
pub struct SceneView {
    pub width: u32,
    pub height: u32,
    pub segments: Vec<SegmentRecord>,
}

async fn segments(State(state): State<AppState>, Query(q): Query<SegmentsQuery>) -> Result<Json<SceneView>, ApiError> {
    let image = decode_image(q.image.as_deref().ok_or_else(|| ApiError::bad_request("missing image parameter"))?)?;
    let segmenter = state.segmenter.clone();
    blocking(move || {
        let segments = segmenter
            .panoptic(&image)
            .map_err(|e| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "SegmenterUnavailable", e.to_string()))?;
        Ok(Json(SceneView {
            width: image.width(),
            height: image.height(),
            segments: segments.iter().map(SegmentRecord::from).collect(),
        }))
    })
    .await
}

async fn healthz(State(state): State<AppState>) -> Json<serde_json::Value> {
    let jobs = state.jobs.list();
    let count = |s: JobStatus| jobs.iter().filter(|j| j.status == s).count();
    Json(json!({
        "status": "ok",
        "queued": count(JobStatus::Queued),
        "running": count(JobStatus::Running),
    }))
}
