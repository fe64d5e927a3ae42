//! HTTP front end for a loaded model.
//!
//! * `POST /recommend`: body is a [`RecommendRequest`], reply a
//!   [`RecommendResponse`].
//! * `GET /healthz`: `{"status": "ok", "model_version": ...}`.
//!
//! Bad input gets a 400 with `{"error": <kind>, "message": ...}`.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;
use tokio::net::TcpListener;

use seqmatch::recommend::{RecommendRequest, RecommendResponse, Recommender};

fn error_body(status: StatusCode, kind: &str, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": kind, "message": message.into() }))).into_response()
}

async fn healthz(State(rec): State<Arc<Recommender>>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "model_version": rec.version() }))
}

async fn recommend(State(rec): State<Arc<Recommender>>, body: Bytes) -> Response {
    let started = Instant::now();
    let req: RecommendRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error_body(StatusCode::BAD_REQUEST, "json", e.to_string()),
    };
    let worker = rec.clone();
    let result = tokio::task::spawn_blocking(move || worker.recommend(&req)).await;
    match result {
        Ok(Ok(items)) => Json(RecommendResponse {
            items,
            model_version: rec.version().to_string(),
            latency_ms: started.elapsed().as_secs_f64() * 1e3,
        })
        .into_response(),
        Ok(Err(e)) => {
            let status = match e {
                seqmatch::Error::InvalidArgument(_) | seqmatch::Error::Data(_) | seqmatch::Error::Parse { .. } => {
                    StatusCode::BAD_REQUEST
                }
                _ => StatusCode::INTERNAL_SERVER_ERROR,
            };
            error_body(status, e.kind(), e.to_string())
        }
        Err(e) => error_body(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
    }
}

pub fn router(rec: Arc<Recommender>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/recommend", post(recommend))
        .with_state(rec)
}

/// Binds `addr` and reports the bound address through `on_bound` before
/// serving forever.
pub async fn serve(
    rec: Arc<Recommender>,
    addr: SocketAddr,
    on_bound: impl FnOnce(SocketAddr),
) -> std::io::Result<()> {
    let listener = TcpListener::bind(addr).await?;
    on_bound(listener.local_addr()?);
    axum::serve(listener, router(rec)).await
}
