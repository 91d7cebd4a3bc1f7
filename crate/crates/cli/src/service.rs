//! HTTP API over the pipeline and the review workflow.
//!
//! | method | path                      | success |
//! |--------|---------------------------|---------|
//! | POST   | `/images` (multipart)     | 201     |
//! | POST   | `/process`                | 202     |
//! | GET    | `/review/queue`           | 200     |
//! | GET    | `/rois/{id}`              | 200     |
//! | GET    | `/rois/{id}/crop`         | 200     |
//! | GET    | `/rois/{id}/matches?n=N`  | 200     |
//! | POST   | `/rois/{id}/decision`     | 200     |
//! | GET    | `/catalogue`              | 200     |
//! | GET    | `/individuals/{id}`       | 200     |
//!
//! Errors are `{"code": ..., "message": ...}` with 400, 404, 409 or 503.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Multipart, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use finpipe_core::catalogue::DecisionOutcome;
use finpipe_core::matcher::MatcherConfig;
use finpipe_core::{CoreError, Decision, MatchResult, Prototype, ReviewItem, RoiRecord};
use serde::{Deserialize, Serialize};

use crate::error::AppError;
use crate::pipeline::{DetectionParams, DetectorKind, Pipeline, ProcessedRoi};

pub const DEFAULT_MATCHES: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    fn bad_request(code: &str, message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            body: ErrorBody { code: code.to_string(), message: message.into() },
        }
    }
}

impl From<AppError> for ApiError {
    fn from(e: AppError) -> Self {
        let code = e.code();
        let status = match code {
            "not_found" => StatusCode::NOT_FOUND,
            "conflict" => StatusCode::CONFLICT,
            "model_unavailable" => StatusCode::SERVICE_UNAVAILABLE,
            "internal" => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            log::error!("request failed: {e}");
        }
        ApiError { status, body: ErrorBody { code: code.to_string(), message: e.to_string() } }
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        AppError::from(e).into()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::bad_request("invalid_request", e.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        ApiError::bad_request("invalid_request", e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

#[derive(Clone)]
pub struct AppState {
    pub pipeline: Arc<Pipeline>,
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> crate::error::Result<T> + Send + 'static) -> ApiResult<T> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError::from),
        Err(e) => Err(ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            body: ErrorBody { code: "internal".into(), message: e.to_string() },
        }),
    }
}

pub fn router(pipeline: Arc<Pipeline>) -> Router {
    Router::new()
        .route("/images", post(post_image))
        .route("/process", post(post_process))
        .route("/review/queue", get(get_queue))
        .route("/rois/:id", get(get_roi))
        .route("/rois/:id/crop", get(get_crop))
        .route("/rois/:id/matches", get(get_matches))
        .route("/rois/:id/decision", post(post_decision))
        .route("/catalogue", get(get_catalogue))
        .route("/individuals/:id", get(get_individual))
        .with_state(AppState { pipeline })
}

pub async fn serve(pipeline: Arc<Pipeline>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(pipeline)).await
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageCreated {
    pub image_id: String,
    pub width_px: u32,
    pub height_px: u32,
}

async fn post_image(State(st): State<AppState>, mut multipart: Multipart) -> ApiResult<(StatusCode, Json<ImageCreated>)> {
    let mut bytes = None;
    let mut meta = BTreeMap::new();
    while let Some(field) = multipart
        .next_field()
        .await
        .map_err(|e| ApiError::bad_request("invalid_request", e.body_text()))?
    {
        let name = field.name().unwrap_or_default().to_string();
        let is_file = field.file_name().is_some() || name == "image";
        let data = field
            .bytes()
            .await
            .map_err(|e| ApiError::bad_request("invalid_request", e.body_text()))?;
        if is_file && bytes.is_none() {
            bytes = Some(data);
        } else {
            meta.insert(name, String::from_utf8_lossy(&data).into_owned());
        }
    }
    let bytes = bytes.ok_or_else(|| ApiError::bad_request("invalid_request", "multipart body has no `image` file part"))?;
    let image = image::load_from_memory(&bytes)
        .map_err(|e| ApiError::bad_request("invalid_input", format!("undecodable image: {e}")))?
        .to_rgb8();
    let record = blocking(move || Ok(st.pipeline.store().put_image(&image, meta)?)).await?;
    Ok((
        StatusCode::CREATED,
        Json(ImageCreated { image_id: record.id, width_px: record.width_px, height_px: record.height_px }),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessRequest {
    pub image_id: String,
    pub detector: DetectorKind,
    pub params: DetectionParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessResponse {
    pub image_id: String,
    pub roi_ids: Vec<String>,
    pub rois: Vec<ProcessedRoi>,
}

async fn post_process(
    State(st): State<AppState>,
    body: Result<Json<ProcessRequest>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<ProcessResponse>)> {
    let Json(req) = body?;
    let image_id = req.image_id.clone();
    let rois = blocking(move || st.pipeline.process_image(&req.image_id, req.detector, &req.params)).await?;
    Ok((
        StatusCode::ACCEPTED,
        Json(ProcessResponse { image_id, roi_ids: rois.iter().map(|r| r.roi_id.clone()).collect(), rois }),
    ))
}

async fn get_queue(State(st): State<AppState>) -> Json<Vec<ReviewItem>> {
    let snap = st.pipeline.store().snapshot();
    Json(snap.pending_reviews().into_iter().cloned().collect())
}

async fn get_roi(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<RoiRecord>> {
    Ok(Json(st.pipeline.store().get_roi(&id)?))
}

async fn get_crop(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    st.pipeline.store().get_roi(&id)?;
    let path = st.pipeline.store().crop_path(&id);
    let bytes = blocking(move || std::fs::read(&path).map_err(|_| CoreError::not_found("crop", id.as_str()).into())).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

#[derive(Debug, Deserialize)]
struct MatchesQuery {
    n: Option<usize>,
}

async fn get_matches(
    State(st): State<AppState>,
    Path(id): Path<String>,
    query: Result<Query<MatchesQuery>, QueryRejection>,
) -> ApiResult<Json<MatchResult>> {
    let Query(q) = query?;
    let n = q.n.unwrap_or(DEFAULT_MATCHES);
    if n == 0 {
        return Err(ApiError::bad_request("invalid_request", "n must be >= 1"));
    }
    let result = blocking(move || st.pipeline.roi_matches(&id, n)).await?;
    Ok(Json(result))
}

async fn post_decision(
    State(st): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<Decision>, JsonRejection>,
) -> ApiResult<Json<DecisionOutcome>> {
    let Json(decision) = body?;
    let outcome = blocking(move || Ok(st.pipeline.store().apply_decision(&id, &decision)?)).await?;
    Ok(Json(outcome))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndividualSummary {
    pub id: String,
    pub label: String,
    pub is_noise: bool,
    pub roi_ids: Vec<String>,
    pub example_count: usize,
    pub has_prototype: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogueView {
    pub id: String,
    pub version: u64,
    pub dimension: usize,
    pub matcher_config: MatcherConfig,
    pub embedder_config_ref: Option<String>,
    pub individuals: Vec<IndividualSummary>,
    pub images: usize,
    pub rois: usize,
    pub pending_reviews: usize,
}

async fn get_catalogue(State(st): State<AppState>) -> Json<CatalogueView> {
    let c = st.pipeline.store().snapshot();
    Json(CatalogueView {
        id: c.id.clone(),
        version: c.version,
        dimension: c.dimension,
        matcher_config: c.matcher_config.clone(),
        embedder_config_ref: c.embedder_config_ref.clone(),
        individuals: c
            .individuals
            .iter()
            .map(|i| IndividualSummary {
                id: i.id.clone(),
                label: i.label.clone(),
                is_noise: i.is_noise,
                roi_ids: i.roi_ids.clone(),
                example_count: i.prototype.as_ref().map_or(0, |p| p.example_count),
                has_prototype: i.prototype.is_some(),
            })
            .collect(),
        images: c.images.len(),
        rois: c.rois.len(),
        pending_reviews: c.pending_reviews().len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndividualView {
    pub id: String,
    pub label: String,
    pub is_noise: bool,
    pub roi_ids: Vec<String>,
    pub prototype: Option<Prototype>,
}

async fn get_individual(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<IndividualView>> {
    let c = st.pipeline.store().snapshot();
    let i = c.individual(&id).ok_or_else(|| CoreError::not_found("individual", id.as_str()))?;
    Ok(Json(IndividualView {
        id: i.id.clone(),
        label: i.label.clone(),
        is_noise: i.is_noise,
        roi_ids: i.roi_ids.clone(),
        prototype: i.prototype.clone(),
    }))
}
