//! HTTP/JSON inference API and static asset serving.

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use deformnet_core::loss::surface_loss_with;
use serde::Deserialize;
use serde_json::{json, Value};
use tower_http::services::ServeDir;

use crate::bundle::ModelBundle;
use crate::contour::contour2d;
use crate::infer::infer;

const INDEX: &str = include_str!("index.html");

#[derive(Default)]
pub struct Metrics {
    pub infer_requests: AtomicU64,
    pub errors: AtomicU64,
}

#[derive(Clone)]
pub struct AppState {
    pub bundle: Arc<ModelBundle>,
    pub metrics: Arc<Metrics>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Want {
    Beta,
    Contour,
    Sdf,
    Timings,
    Reference,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct InferRequest {
    alpha: Vec<f64>,
    #[serde(default = "default_want")]
    want: Vec<Want>,
}

fn default_want() -> Vec<Want> {
    vec![Want::Beta, Want::Contour, Want::Timings]
}

/// Builds the service. `ui_dir`, when given, is served at `/`; otherwise a
/// minimal built-in page is.
pub fn router(bundle: Arc<ModelBundle>, ui_dir: Option<PathBuf>) -> Router {
    let state = AppState {
        bundle,
        metrics: Arc::new(Metrics::default()),
    };
    let api = Router::new()
        .route("/api/meta", get(meta))
        .route("/api/infer", post(infer_handler))
        .route("/api/ablation", get(ablation))
        .route("/api/metrics", get(metrics))
        .route("/api/{*rest}", get(not_found).post(not_found))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir).fallback(get(not_found))),
        None => api.route("/", get(|| async { Html(INDEX) })).fallback(not_found),
    }
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "no such route")
}

async fn meta(State(s): State<AppState>) -> Json<Value> {
    let b = &s.bundle;
    Json(json!({
        "param_axes": b.axes,
        "sdf_res": b.sdf_res(),
        "defo_res": b.defo_res(),
        "dims": b.dims(),
        "spacing": b.model.psi0.spacing(),
        "n_weights": b.model.seq.len(),
        "has_refinement": b.model.dnet.is_some(),
        "has_ablation": b.ablation.is_some(),
        "references": b.references.iter().map(|r| &r.alpha).collect::<Vec<_>>(),
    }))
}

async fn ablation(State(s): State<AppState>) -> Result<Json<Value>, ApiError> {
    match &s.bundle.ablation {
        Some(r) => Ok(Json(serde_json::to_value(r).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?)),
        None => Err(ApiError::new(StatusCode::NOT_FOUND, "model has no ablation report")),
    }
}

async fn metrics(State(s): State<AppState>) -> Json<Value> {
    Json(json!({
        "infer_requests": s.metrics.infer_requests.load(Ordering::Relaxed),
        "errors": s.metrics.errors.load(Ordering::Relaxed),
    }))
}

async fn infer_handler(State(s): State<AppState>, body: Bytes) -> Response {
    s.metrics.infer_requests.fetch_add(1, Ordering::Relaxed);
    let result = match serde_json::from_slice::<InferRequest>(&body) {
        Err(e) => Err(ApiError::new(StatusCode::BAD_REQUEST, format!("malformed request body: {e}"))),
        Ok(req) => {
            let bundle = s.bundle.clone();
            tokio::task::spawn_blocking(move || respond(&bundle, &req))
                .await
                .unwrap_or_else(|e| Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())))
        }
    };
    match result {
        Ok(v) => ([(header::CACHE_CONTROL, "public, max-age=3600")], Json(v)).into_response(),
        Err(e) => {
            s.metrics.errors.fetch_add(1, Ordering::Relaxed);
            e.into_response()
        }
    }
}

fn respond(bundle: &ModelBundle, req: &InferRequest) -> Result<Value, ApiError> {
    let n = bundle.n_params();
    if req.alpha.len() != n {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("alpha has {} components but the model has {n} parameter axes", req.alpha.len()),
        ));
    }
    let wants = |w: Want| req.want.contains(&w);
    if (wants(Want::Contour) || wants(Want::Reference)) && bundle.dims() != 2 {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("contours need a 2D model, this one is {}D", bundle.dims()),
        ));
    }
    let r = infer(bundle, &req.alpha).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    let internal = |e: deformnet_core::Error| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string());
    let mut out = serde_json::Map::new();
    out.insert("alpha".into(), json!(r.alpha));
    out.insert("clamped".into(), json!(r.clamped));
    if wants(Want::Beta) {
        out.insert("beta".into(), json!(r.beta));
    }
    if wants(Want::Contour) {
        out.insert("contour".into(), json!(contour2d(&r.psi, 0.0).map_err(internal)?));
    }
    if wants(Want::Sdf) {
        let mut bytes = Vec::with_capacity(r.psi.values().len() * 4);
        for v in r.psi.values() {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out.insert(
            "sdf".into(),
            json!({
                "res": r.psi.res(),
                "spacing": r.psi.spacing(),
                "data": base64::engine::general_purpose::STANDARD.encode(bytes),
            }),
        );
    }
    if wants(Want::Reference) {
        let v = match bundle.reference(&r.alpha) {
            Some(rf) => json!({
                "contour": contour2d(&rf.phi, 0.0).map_err(internal)?,
                "loss": surface_loss_with(&r.psi, &rf.phi, bundle.sigma).map_err(internal)?,
            }),
            None => Value::Null,
        };
        out.insert("reference".into(), v);
    }
    if wants(Want::Timings) {
        out.insert("timings".into(), json!(r.timings));
    }
    Ok(Value::Object(out))
}

/// Binds `addr` and serves until ctrl-c.
pub async fn serve(bundle: Arc<ModelBundle>, addr: std::net::SocketAddr, ui_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(bundle, ui_dir))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
