//! HTTP inference service.
//!
//! * `GET /health` gives `{"status":"ok","model":"<sha256>"}`.
//! * `POST /infer` takes `{"image": "<base64 PNG or JPEG>", "class": "<optional key>"}`
//!   and answers with the refined polygon, the pre-refinement polygon, the
//!   class and its probabilities. Wall time goes in the `x-timing-ms` header
//!   so the body depends on the input alone.
//! * `POST /refine` takes `{"image": ..., "polygon": [[x, y], ...]}` and
//!   answers `{"polygon": [...]}` after one refiner pass.
//!
//! Errors are `{"error": "<reason>"}` with 400 for bad input and 413 for
//! images over 8192 wide or 4096 high.

use std::sync::Arc;
use std::time::Instant;

use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};

use boundary_engine::geom::Point;
use boundary_engine::io::{decode_image, image_dimensions};
use boundary_engine::mcnn::{RegionClass, MIN_SIDE};
use boundary_engine::model::Model;
use boundary_engine::Tensor;

pub const MAX_WIDTH: u32 = 8192;
pub const MAX_HEIGHT: u32 = 4096;
/// Request bodies beyond this are refused before parsing.
pub const MAX_BODY_BYTES: usize = 256 << 20;

pub struct AppState {
    model: Model,
    fingerprint: String,
}

impl AppState {
    pub fn new(model: Model) -> boundary_engine::Result<Self> {
        let fingerprint = model.fingerprint()?;
        Ok(Self { model, fingerprint })
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/infer", post(infer))
        .route("/refine", post(refine))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state)
}

pub struct ApiError(StatusCode, String);

impl ApiError {
    fn bad(msg: impl Into<String>) -> Self {
        ApiError(StatusCode::BAD_REQUEST, msg.into())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        let status = match r.status() {
            StatusCode::PAYLOAD_TOO_LARGE => StatusCode::PAYLOAD_TOO_LARGE,
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError(status, r.body_text())
    }
}

#[derive(Serialize)]
struct Health<'a> {
    status: &'static str,
    model: &'a str,
}

async fn health(State(s): State<Arc<AppState>>) -> impl IntoResponse {
    Json(Health {
        status: "ok",
        model: &s.fingerprint,
    })
    .into_response()
}

#[derive(Deserialize)]
pub struct InferRequest {
    pub image: String,
    #[serde(default)]
    pub class: Option<String>,
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
pub struct InferResponse {
    pub polygon: Vec<[f64; 2]>,
    pub initial_polygon: Vec<[f64; 2]>,
    pub region_class: String,
    pub class_probs: Vec<f64>,
}

#[derive(Deserialize)]
pub struct RefineRequest {
    pub image: String,
    pub polygon: Vec<[f64; 2]>,
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
pub struct RefineResponse {
    pub polygon: Vec<[f64; 2]>,
}

/// Base64 image bytes to a crop tensor, enforcing size limits from the
/// header before decoding pixels.
pub fn decode_crop(b64: &str) -> Result<Tensor, ApiError> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(b64.trim())
        .map_err(|e| ApiError::bad(format!("image is not valid base64: {e}")))?;
    let (w, h) = image_dimensions(&bytes).map_err(|e| ApiError::bad(format!("unreadable image: {e}")))?;
    if w > MAX_WIDTH || h > MAX_HEIGHT {
        return Err(ApiError(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("image {w}x{h} exceeds {MAX_WIDTH}x{MAX_HEIGHT}"),
        ));
    }
    if (w as usize) < MIN_SIDE || (h as usize) < MIN_SIDE {
        return Err(ApiError::bad(format!("image {w}x{h} is below {MIN_SIDE}x{MIN_SIDE}")));
    }
    decode_image(&bytes).map_err(|e| ApiError::bad(format!("unreadable image: {e}")))
}

fn pairs(points: &[Point]) -> Vec<[f64; 2]> {
    points.iter().map(|p| [p.x, p.y]).collect()
}

async fn run_blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

fn timed(start: Instant, body: impl Serialize) -> Response {
    let mut resp = Json(body).into_response();
    let ms = format!("{:.3}", start.elapsed().as_secs_f64() * 1e3);
    resp.headers_mut()
        .insert("x-timing-ms", HeaderValue::from_str(&ms).expect("ascii"));
    resp
}

async fn infer(
    State(s): State<Arc<AppState>>,
    req: Result<Json<InferRequest>, JsonRejection>,
) -> Result<Response, ApiError> {
    let start = Instant::now();
    let Json(req) = req?;
    let known = match &req.class {
        Some(c) => Some(
            c.parse::<RegionClass>()
                .map_err(|_| ApiError::bad(format!("unknown class `{c}`")))?,
        ),
        None => None,
    };
    let body = run_blocking(move || {
        let crop = decode_crop(&req.image)?;
        let p = s
            .model
            .predict(&crop)
            .map_err(|e| ApiError::bad(e.to_string()))?;
        Ok(InferResponse {
            polygon: pairs(p.polygon.points()),
            initial_polygon: pairs(p.initial_polygon.points()),
            region_class: known.unwrap_or(p.region_class).key().to_string(),
            class_probs: p.class_probs,
        })
    })
    .await?;
    Ok(timed(start, body))
}

async fn refine(
    State(s): State<Arc<AppState>>,
    req: Result<Json<RefineRequest>, JsonRejection>,
) -> Result<Response, ApiError> {
    let start = Instant::now();
    let Json(req) = req?;
    let body = run_blocking(move || {
        let crop = decode_crop(&req.image)?;
        let pts: Vec<Point> = req.polygon.iter().map(|&[x, y]| Point::new(x, y)).collect();
        if pts.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(ApiError::bad("polygon has non-finite coordinates"));
        }
        let out = s
            .model
            .refine_once(&crop, &pts)
            .map_err(|e| ApiError::bad(e.to_string()))?;
        Ok(RefineResponse {
            polygon: pairs(out.points()),
        })
    })
    .await?;
    Ok(timed(start, body))
}
