//! HTTP backend for the annotation and prediction-review UI.
//!
//! Data directory layout:
//!
//! ```text
//! <data>/mips/<id>_frontal.png, <id>_sagittal.png (+ .json sidecars)
//! <data>/annotations/<id>.json   written by this service
//! <data>/predictions/<id>.json   optional, written by `mipslice predict`
//! ```

pub mod store;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use mipslice_core::mip::View;
use mipslice_core::targets::write_annotations;
use serde::Deserialize;
use tower_http::cors::{AllowOrigin, CorsLayer};

pub use store::{AnnotationRecord, ImageSummary, Store, StoreError};

/// Request failure mapped onto an HTTP status with a JSON `{"error": ...}` body.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        ApiError { status: StatusCode::BAD_REQUEST, message: message.into() }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let status = match &e {
            StoreError::UnknownImage(_) | StoreError::NoAnnotation { .. } | StoreError::NoPrediction(_) => {
                StatusCode::NOT_FOUND
            }
            StoreError::OutOfRange(_) => StatusCode::UNPROCESSABLE_ENTITY,
            StoreError::Io { .. } | StoreError::Corrupt { .. } => {
                log::error!("{e}");
                StatusCode::INTERNAL_SERVER_ERROR
            }
        };
        ApiError { status, message: e.to_string() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Deserialize)]
struct AnnotatorQuery {
    annotator: Option<String>,
}

/// Body of `PUT /api/images/{id}/annotation`. `image_id` and `annotator`
/// may be repeated from the URL but must then agree with it.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PutBody {
    y_mm: f64,
    #[serde(default)]
    ambiguous: bool,
    image_id: Option<String>,
    annotator: Option<String>,
}

fn annotator(q: AnnotatorQuery) -> ApiResult<String> {
    match q.annotator.map(|a| a.trim().to_string()) {
        Some(a) if !a.is_empty() => Ok(a),
        _ => Err(ApiError::bad_request("missing annotator query parameter")),
    }
}

async fn list_images(State(store): State<Arc<Store>>) -> ApiResult<Json<Vec<ImageSummary>>> {
    Ok(Json(store.summaries()?))
}

async fn get_mip(State(store): State<Arc<Store>>, Path((id, view)): Path<(String, String)>) -> ApiResult<Response> {
    let view: View = view.parse().map_err(|_| StoreError::UnknownImage(format!("{id}/{view}")))?;
    let path = store.mip_path(&id, view).ok_or_else(|| StoreError::UnknownImage(id.clone()))?;
    let bytes = tokio::fs::read(&path).await.map_err(|source| StoreError::Io { path, source })?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn get_annotation(
    State(store): State<Arc<Store>>,
    Path(id): Path<String>,
    Query(q): Query<AnnotatorQuery>,
) -> ApiResult<Response> {
    match q.annotator {
        None => Ok(Json(store.records(&id)?).into_response()),
        Some(_) => Ok(Json(store.record(&id, &annotator(q)?)?).into_response()),
    }
}

async fn put_annotation(
    State(store): State<Arc<Store>>,
    Path(id): Path<String>,
    Query(q): Query<AnnotatorQuery>,
    body: Bytes,
) -> ApiResult<Json<AnnotationRecord>> {
    let who = annotator(q)?;
    store.height_mm(&id)?;
    let body: PutBody =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("malformed annotation body: {e}")))?;
    if body.image_id.as_ref().is_some_and(|b| *b != id) {
        return Err(ApiError::bad_request("image_id in body does not match the URL"));
    }
    if body.annotator.as_ref().is_some_and(|b| b.trim() != who) {
        return Err(ApiError::bad_request("annotator in body does not match the query"));
    }
    Ok(Json(store.put(&id, &who, body.y_mm, body.ambiguous).await?))
}

async fn get_prediction(State(store): State<Arc<Store>>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(store.prediction(&id)?).into_response())
}

async fn export_csv(State(store): State<Arc<Store>>) -> ApiResult<Response> {
    let rows = store.export()?;
    let mut buf = Vec::new();
    write_annotations(&mut buf, &rows)
        .map_err(|e| ApiError { status: StatusCode::INTERNAL_SERVER_ERROR, message: e.to_string() })?;
    Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], buf).into_response())
}

/// CORS policy: a single allowed origin, or any origin when `None`.
pub fn cors(origin: Option<&str>) -> Result<CorsLayer, String> {
    let allow = match origin {
        Some(o) => AllowOrigin::exact(HeaderValue::from_str(o).map_err(|e| format!("invalid CORS origin {o:?}: {e}"))?),
        None => AllowOrigin::any(),
    };
    Ok(CorsLayer::new()
        .allow_origin(allow)
        .allow_methods([Method::GET, Method::PUT])
        .allow_headers([header::CONTENT_TYPE]))
}

pub fn router(store: Arc<Store>, cors: CorsLayer) -> Router {
    Router::new()
        .route("/api/images", get(list_images))
        .route("/api/images/{id}/mip/{view}", get(get_mip))
        .route("/api/images/{id}/annotation", get(get_annotation).put(put_annotation))
        .route("/api/images/{id}/prediction", get(get_prediction))
        .route("/api/export/annotations.csv", get(export_csv))
        .layer(cors)
        .with_state(store)
}

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub data_dir: PathBuf,
    pub addr: SocketAddr,
    pub cors_origin: Option<String>,
}

/// Bind and serve until the process is stopped.
pub async fn serve(cfg: ServeConfig) -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
    let store = Arc::new(Store::open(&cfg.data_dir)?);
    let app = router(store, cors(cfg.cors_origin.as_deref())?);
    let listener = tokio::net::TcpListener::bind(cfg.addr).await?;
    log::info!("serving {} on http://{}", cfg.data_dir.display(), listener.local_addr()?);
    axum::serve(listener, app).await?;
    Ok(())
}
