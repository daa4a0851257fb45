//! HTTP scoring and annotation service.
//!
//! Scoring runs on shared read-only weights inside `spawn_blocking`, behind a
//! FIFO limiter. Annotation state lives in an [`AnnotationStore`].

pub mod store;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use fthnet_core::dataset::images::{check_min_size, decode_rgb, prepare};
use fthnet_core::dataset::ratings::{
    aggregate_mos, level_from_score, population_sd, rating_sd_stats, AggregationWeights, Level, LevelThresholds,
    RaterTier, RatingRecord, SdQuartiles,
};
use fthnet_core::model::Fthnet;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

pub use store::{AnnotationStore, ImageInfo, ProjectInfo, Rater, StoreError};

/// Environment variable holding the listen address.
pub const LISTEN_ENV: &str = "FTHNET_LISTEN";
pub const DEFAULT_LISTEN: &str = "127.0.0.1:8080";
/// Optional header naming the rater; must agree with the body when present.
pub const RATER_HEADER: &str = "x-rater-id";

#[derive(Clone, Copy, Debug)]
pub struct Limits {
    pub in_flight: usize,
    pub queue_depth: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            in_flight: 4,
            queue_depth: 64,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ServiceConfig {
    pub limits: Limits,
    pub thresholds: LevelThresholds,
    pub weights: AggregationWeights,
    /// Rating SD above which an image is flagged for discussion.
    pub discuss_sd: f64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            limits: Limits::default(),
            thresholds: LevelThresholds::default(),
            weights: AggregationWeights::default(),
            discuss_sd: 8.0,
        }
    }
}

/// Admits at most `in_flight + queue_depth` scoring requests; the semaphore
/// hands out permits in FIFO order.
struct Limiter {
    permits: Semaphore,
    admitted: AtomicUsize,
    capacity: usize,
}

struct Admission<'a>(&'a AtomicUsize);

impl Drop for Admission<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

impl Limiter {
    fn admit(&self) -> Option<Admission<'_>> {
        if self.admitted.fetch_add(1, Ordering::SeqCst) >= self.capacity {
            self.admitted.fetch_sub(1, Ordering::SeqCst);
            return None;
        }
        Some(Admission(&self.admitted))
    }
}

pub struct AppState {
    models: HashMap<String, Arc<Fthnet<f32>>>,
    store: AnnotationStore,
    limiter: Limiter,
    config: ServiceConfig,
}

impl AppState {
    /// `models` maps the `model` query value (`s`, `l`) to loaded weights.
    pub fn new(models: HashMap<String, Fthnet<f32>>, store: AnnotationStore, config: ServiceConfig) -> Arc<Self> {
        Arc::new(Self {
            models: models.into_iter().map(|(k, v)| (k, Arc::new(v))).collect(),
            store,
            limiter: Limiter {
                permits: Semaphore::new(config.limits.in_flight.max(1)),
                admitted: AtomicUsize::new(0),
                capacity: config.limits.in_flight.max(1) + config.limits.queue_depth,
            },
            config,
        })
    }

    pub fn store(&self) -> &AnnotationStore {
        &self.store
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    reason: String,
}

impl ApiError {
    fn new(status: StatusCode, reason: impl Into<String>) -> Self {
        Self {
            status,
            reason: reason.into(),
        }
    }

    fn bad_request(reason: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, reason)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.reason }))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let status = match &e {
            StoreError::UnknownRater(_) => StatusCode::UNAUTHORIZED,
            StoreError::UnknownProject(_) | StoreError::UnknownImage(_) => StatusCode::NOT_FOUND,
            StoreError::DuplicateRating { .. } | StoreError::RaterConflict(_) => StatusCode::CONFLICT,
            StoreError::Invalid(_) => StatusCode::BAD_REQUEST,
            StoreError::Io(_) | StoreError::Json(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status.is_server_error() {
            log::error!("store failure: {e}");
        }
        Self::new(status, e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/score", post(score))
        .route("/v1/raters", post(register_rater))
        .route("/v1/projects", post(create_project).get(list_projects))
        .route("/v1/projects/{id}/images", post(upload_image))
        .route("/v1/projects/{id}/images/{image_id}", get(image_bytes))
        .route("/v1/projects/{id}/next", get(next_image))
        .route("/v1/projects/{id}/aggregate", get(aggregate))
        .route("/v1/ratings", post(submit_rating))
        .route("/v1/spec", get(openapi))
        .with_state(state)
}

/// Bind `addr` (or `$FTHNET_LISTEN`, or the default) and serve until ctrl-c.
pub async fn serve(state: Arc<AppState>, addr: Option<SocketAddr>) -> std::io::Result<()> {
    let addr = match addr {
        Some(a) => a,
        None => std::env::var(LISTEN_ENV)
            .unwrap_or_else(|_| DEFAULT_LISTEN.to_string())
            .parse()
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, format!("{LISTEN_ENV}: {e}")))?,
    };
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

#[derive(Debug, Deserialize)]
struct ScoreQuery {
    model: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub score: f64,
    pub level: Level,
    pub latency_ms: f64,
    pub model: String,
}

async fn score(State(st): State<Arc<AppState>>, Query(q): Query<ScoreQuery>, body: Bytes) -> ApiResult<Json<ScoreResponse>> {
    let model = q.model.unwrap_or_else(|| "s".to_string());
    if model != "s" && model != "l" {
        return Err(ApiError::bad_request(format!("unknown model `{model}`; expected s or l")));
    }
    let net = st
        .models
        .get(&model)
        .cloned()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, format!("model `{model}` is not loaded")))?;

    let _admission = st
        .limiter
        .admit()
        .ok_or_else(|| ApiError::new(StatusCode::TOO_MANY_REQUESTS, "inference queue is full"))?;
    let _permit = st
        .limiter
        .permits
        .acquire()
        .await
        .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "service shutting down"))?;

    let (raw, latency_ms) = tokio::task::spawn_blocking(move || -> Result<(f64, f64), ApiError> {
        let img = decode_rgb(&body).map_err(|e| ApiError::bad_request(format!("undecodable image: {e}")))?;
        check_min_size(&img).map_err(|e| ApiError::bad_request(e.to_string()))?;
        let x = prepare::<f32>(&img, net.config().input_size);
        let t = Instant::now();
        let s = net
            .predict(&x)
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
        Ok((s, t.elapsed().as_secs_f64() * 1e3))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("inference task failed: {e}")))??;

    if !raw.is_finite() {
        return Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "model produced a non-finite score"));
    }
    let score = raw.clamp(0.0, 100.0);
    let level = level_from_score(score, st.config.thresholds).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(Json(ScoreResponse {
        score,
        level,
        latency_ms,
        model,
    }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RaterBody {
    id: String,
    tier: RaterTier,
}

async fn register_rater(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<(StatusCode, Json<Rater>)> {
    let b: RaterBody = parse_json(&body)?;
    let r = st.store.register_rater(Rater { id: b.id, tier: b.tier })?;
    Ok((StatusCode::CREATED, Json(r)))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProjectBody {
    name: String,
    #[serde(default)]
    reference: bool,
}

async fn create_project(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<(StatusCode, Json<ProjectInfo>)> {
    let b: ProjectBody = parse_json(&body)?;
    Ok((StatusCode::CREATED, Json(st.store.create_project(&b.name, b.reference)?)))
}

async fn list_projects(State(st): State<Arc<AppState>>) -> Json<Vec<ProjectInfo>> {
    Json(st.store.projects())
}

#[derive(Debug, Deserialize)]
struct UploadQuery {
    #[serde(default)]
    reference: bool,
}

async fn upload_image(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<UploadQuery>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<ImageInfo>)> {
    let ext = match image::guess_format(&body) {
        Ok(image::ImageFormat::Png) => "png",
        Ok(image::ImageFormat::Jpeg) => "jpg",
        _ => return Err(ApiError::bad_request("expected a PNG or JPEG body")),
    };
    let img = decode_rgb(&body).map_err(|e| ApiError::bad_request(format!("undecodable image: {e}")))?;
    check_min_size(&img).map_err(|e| ApiError::bad_request(e.to_string()))?;
    Ok((StatusCode::CREATED, Json(st.store.add_image(&id, &body, ext, q.reference)?)))
}

async fn image_bytes(State(st): State<Arc<AppState>>, Path((id, image_id)): Path<(String, String)>) -> ApiResult<Response> {
    let (info, bytes) = st.store.image_bytes(&id, &image_id)?;
    let mime = if info.file.ends_with(".png") { "image/png" } else { "image/jpeg" };
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

#[derive(Debug, Deserialize)]
struct NextQuery {
    rater: String,
}

async fn next_image(State(st): State<Arc<AppState>>, Path(id): Path<String>, Query(q): Query<NextQuery>) -> ApiResult<Response> {
    Ok(match st.store.next_for(&id, &q.rater)? {
        Some(img) => Json(img).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RatingBody {
    project_id: String,
    image_id: String,
    rater_id: String,
    score: u8,
    level: Level,
}

async fn submit_rating(State(st): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> ApiResult<(StatusCode, Json<store::StoredRating>)> {
    let b: RatingBody = parse_json(&body)?;
    if let Some(h) = headers.get(RATER_HEADER) {
        if h.to_str().ok() != Some(b.rater_id.as_str()) {
            return Err(ApiError::new(StatusCode::UNAUTHORIZED, "rater header does not match body"));
        }
    }
    let r = st.store.add_rating(&b.project_id, &b.image_id, &b.rater_id, b.score, b.level)?;
    Ok((StatusCode::CREATED, Json(r)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageAggregate {
    pub image_id: String,
    pub reference: bool,
    pub n_ratings: usize,
    /// Absent when the configured weights cannot be applied (for example a
    /// tier without ratings); `mos_error` then says why.
    pub mos: Option<f64>,
    pub mos_error: Option<String>,
    /// Population SD of the scores; absent with fewer than two ratings.
    pub sd: Option<f64>,
    pub discuss: bool,
    pub ratings: Vec<RatingRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateResponse {
    pub project_id: String,
    pub discuss_sd: f64,
    pub images: Vec<ImageAggregate>,
    pub sd_quartiles: Option<SdQuartiles>,
    pub sd_skipped: usize,
}

async fn aggregate(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<AggregateResponse>> {
    let rated: Vec<_> = st.store.ratings(&id)?.into_iter().filter(|(_, r)| !r.is_empty()).collect();
    let scores: Vec<Vec<f64>> = rated
        .iter()
        .map(|(_, rs)| rs.iter().map(|r| f64::from(r.score)).collect())
        .collect();
    let stats = rating_sd_stats(&scores);
    let images = rated
        .into_iter()
        .zip(&scores)
        .map(|((info, ratings), s)| {
            let (mos, mos_error) = match aggregate_mos(&ratings, &st.config.weights) {
                Ok(m) => (Some(m), None),
                Err(e) => (None, Some(e.to_string())),
            };
            let sd = (s.len() >= 2).then(|| population_sd(s));
            ImageAggregate {
                image_id: info.id,
                reference: info.reference,
                n_ratings: ratings.len(),
                mos,
                mos_error,
                sd,
                discuss: sd.is_some_and(|v| v > st.config.discuss_sd),
                ratings,
            }
        })
        .collect();
    Ok(Json(AggregateResponse {
        project_id: id,
        discuss_sd: st.config.discuss_sd,
        images,
        sd_quartiles: stats.quartiles,
        sd_skipped: stats.skipped,
    }))
}

fn parse_json<T: for<'de> Deserialize<'de>>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")))
}

async fn openapi() -> Json<serde_json::Value> {
    Json(openapi_document())
}

/// OpenAPI 3 description of every route.
pub fn openapi_document() -> serde_json::Value {
    use serde_json::json;
    let err = json!({ "description": "error", "content": { "application/json": { "schema": { "$ref": "#/components/schemas/Error" } } } });
    let id_param = json!({ "name": "id", "in": "path", "required": true, "schema": { "type": "string" } });
    json!({
        "openapi": "3.0.3",
        "info": { "title": "FTHNet fundus quality service", "version": env!("CARGO_PKG_VERSION") },
        "paths": {
            "/v1/score": { "post": {
                "summary": "Score one PNG or JPEG fundus image",
                "parameters": [{ "name": "model", "in": "query", "schema": { "type": "string", "enum": ["s", "l"], "default": "s" } }],
                "requestBody": { "required": true, "content": { "image/png": {}, "image/jpeg": {} } },
                "responses": {
                    "200": { "description": "score", "content": { "application/json": { "schema": { "$ref": "#/components/schemas/ScoreResponse" } } } },
                    "400": err, "429": err, "503": err
                }
            }},
            "/v1/raters": { "post": {
                "summary": "Register a rater with a tier",
                "requestBody": { "required": true, "content": { "application/json": { "schema": { "$ref": "#/components/schemas/Rater" } } } },
                "responses": { "201": { "description": "registered" }, "400": err, "409": err }
            }},
            "/v1/projects": {
                "post": {
                    "summary": "Create a labeling project",
                    "requestBody": { "required": true, "content": { "application/json": { "schema": {
                        "type": "object", "required": ["name"],
                        "properties": { "name": { "type": "string" }, "reference": { "type": "boolean" } }
                    } } } },
                    "responses": { "201": { "description": "created" }, "400": err }
                },
                "get": { "summary": "List projects", "responses": { "200": { "description": "projects" } } }
            },
            "/v1/projects/{id}/images": { "post": {
                "summary": "Upload an image (raw body)",
                "parameters": [id_param, { "name": "reference", "in": "query", "schema": { "type": "boolean" } }],
                "requestBody": { "required": true, "content": { "image/png": {}, "image/jpeg": {} } },
                "responses": { "201": { "description": "stored" }, "400": err, "404": err }
            }},
            "/v1/projects/{id}/images/{image_id}": { "get": {
                "summary": "Fetch stored image bytes",
                "parameters": [id_param, { "name": "image_id", "in": "path", "required": true, "schema": { "type": "string" } }],
                "responses": { "200": { "description": "image" }, "404": err }
            }},
            "/v1/projects/{id}/next": { "get": {
                "summary": "Next image the rater has not rated",
                "parameters": [id_param, { "name": "rater", "in": "query", "required": true, "schema": { "type": "string" } }],
                "responses": { "200": { "description": "image" }, "204": { "description": "all rated" }, "401": err, "404": err }
            }},
            "/v1/ratings": { "post": {
                "summary": "Submit one rating",
                "requestBody": { "required": true, "content": { "application/json": { "schema": { "$ref": "#/components/schemas/RatingSubmission" } } } },
                "responses": { "201": { "description": "stored" }, "400": err, "401": err, "404": err, "409": err }
            }},
            "/v1/projects/{id}/aggregate": { "get": {
                "summary": "Per-image MOS, rating SD and disagreement flags",
                "parameters": [id_param],
                "responses": { "200": { "description": "aggregate" }, "404": err }
            }},
            "/v1/spec": { "get": { "summary": "This document", "responses": { "200": { "description": "OpenAPI JSON" } } } }
        },
        "components": { "schemas": {
            "Error": { "type": "object", "properties": { "error": { "type": "string" } } },
            "ScoreResponse": { "type": "object", "required": ["score", "level", "latency_ms", "model"], "properties": {
                "score": { "type": "number", "minimum": 0, "maximum": 100 },
                "level": { "type": "string", "enum": ["Good", "Usable", "Reject"] },
                "latency_ms": { "type": "number" },
                "model": { "type": "string", "enum": ["s", "l"] }
            }},
            "Rater": { "type": "object", "required": ["id", "tier"], "properties": {
                "id": { "type": "string", "pattern": "^[A-Za-z0-9_-]{1,64}$" },
                "tier": { "type": "string", "enum": ["experienced", "junior"] }
            }},
            "RatingSubmission": { "type": "object", "required": ["project_id", "image_id", "rater_id", "score", "level"], "properties": {
                "project_id": { "type": "string" },
                "image_id": { "type": "string" },
                "rater_id": { "type": "string" },
                "score": { "type": "integer", "minimum": 0, "maximum": 100 },
                "level": { "type": "string", "enum": ["Good", "Usable", "Reject"] }
            }}
        }}
    })
}
