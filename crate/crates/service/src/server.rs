//! HTTP routes over [`App`].

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::{json, Value};

use crate::app::App;
use crate::error::{ErrorBody, ServiceError};

fn error(status: StatusCode, body: ErrorBody) -> Response {
    (status, Json(body.to_json())).into_response()
}

fn not_found(what: String) -> Response {
    error(StatusCode::NOT_FOUND, ErrorBody::new("not_found", what))
}

async fn create_job(State(app): State<Arc<App>>, body: Bytes) -> Response {
    let value: Value = match serde_json::from_slice(&body) {
        Ok(v) => v,
        Err(e) => return error(StatusCode::BAD_REQUEST, ErrorBody::new("malformed", format!("body is not JSON: {e}"))),
    };
    match app.submit(&value) {
        Ok(job) => (
            StatusCode::ACCEPTED,
            [(header::LOCATION, format!("/jobs/{}", job.id))],
            Json(json!({"id": job.id, "status": job.status})),
        )
            .into_response(),
        Err(e) if e.kind == "validation" => error(StatusCode::BAD_REQUEST, e),
        Err(e) => error(StatusCode::SERVICE_UNAVAILABLE, e),
    }
}

async fn get_job(State(app): State<Arc<App>>, Path(id): Path<String>) -> Response {
    match app.store.get(&id) {
        Some(job) => Json(job).into_response(),
        None => not_found(format!("job {id}")),
    }
}

async fn get_image(State(app): State<Arc<App>>, Path(id): Path<String>) -> Response {
    match app.engine.images().get(&id) {
        Ok(bytes) => ([(header::CONTENT_TYPE, "image/png")], bytes).into_response(),
        Err(ServiceError::NotFound(what)) => not_found(what),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, ErrorBody::from(&e)),
    }
}

async fn presets(State(app): State<Arc<App>>) -> Json<Value> {
    Json(app.engine.presets())
}

async fn health(State(app): State<Arc<App>>) -> Json<Value> {
    Json(json!({"status": "ok", "checkpoint_id": app.engine.checkpoint_id()}))
}

async fn fallback() -> Response {
    not_found("no such route".into())
}

pub fn router(app: Arc<App>) -> Router {
    Router::new()
        .route("/jobs", post(create_job))
        .route("/jobs/{id}", get(get_job))
        .route("/images/{id}", get(get_image))
        .route("/presets", get(presets))
        .route("/health", get(health))
        .fallback(fallback)
        .with_state(app)
}

/// Serves until the listener fails.
pub async fn serve(app: Arc<App>, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(app)).await
}
