//! HTTP front end: `POST /api/{op}` with the request fields as a JSON
//! object, bearer token in `Authorization`.

use std::sync::{Arc, Mutex};

use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rfidtrace_core::{ApiError, Request, Service};
use serde_json::{json, Value};

type Shared = Arc<Mutex<Service>>;

pub fn router(service: Service) -> Router {
    let shared: Shared = Arc::new(Mutex::new(service));
    Router::new().route("/api/health", get(health).post(health)).route("/api/:op", post(call)).with_state(shared)
}

fn status_for(e: &ApiError) -> StatusCode {
    match e.code() {
        "unauthenticated" | "bad_credentials" | "disabled" => StatusCode::UNAUTHORIZED,
        "forbidden" => StatusCode::FORBIDDEN,
        "bad_request" => StatusCode::BAD_REQUEST,
        "not_found" => StatusCode::NOT_FOUND,
        "codec" | "rf" => StatusCode::UNPROCESSABLE_ENTITY,
        "network" | "sync" => StatusCode::BAD_GATEWAY,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

fn failure(status: StatusCode, code: &str, message: String) -> Response {
    (status, Json(json!({ "error": code, "message": message }))).into_response()
}

async fn run(shared: Shared, token: Option<String>, req: Request) -> Response {
    let outcome = tokio::task::spawn_blocking(move || {
        let mut service = shared.lock().unwrap_or_else(|p| p.into_inner());
        service.handle(token.as_deref(), req)
    })
    .await;
    match outcome {
        Ok(Ok(value)) => Json(value).into_response(),
        Ok(Err(e)) => failure(status_for(&e), e.code(), e.to_string()),
        Err(e) => failure(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
    }
}

async fn health(State(shared): State<Shared>) -> Response {
    run(shared, None, Request::Health).await
}

fn bearer(headers: &HeaderMap) -> Option<String> {
    let value = headers.get(axum::http::header::AUTHORIZATION)?.to_str().ok()?;
    value.strip_prefix("Bearer ").map(|t| t.trim().to_string())
}

async fn call(
    State(shared): State<Shared>,
    Path(op): Path<String>,
    headers: HeaderMap,
    body: Option<Json<Value>>,
) -> Response {
    let mut fields = match body {
        Some(Json(Value::Object(m))) => m,
        Some(Json(Value::Null)) | None => Default::default(),
        Some(_) => return failure(StatusCode::BAD_REQUEST, "bad_request", "body must be a JSON object".into()),
    };
    fields.insert("op".into(), Value::String(op.clone()));
    let req: Request = match serde_json::from_value(Value::Object(fields)) {
        Ok(r) => r,
        Err(e) => return failure(StatusCode::BAD_REQUEST, "bad_request", format!("{op}: {e}")),
    };
    run(shared, bearer(&headers), req).await
}

/// Serves until the listener fails or the process is interrupted.
pub async fn serve(listener: tokio::net::TcpListener, service: Service) -> std::io::Result<()> {
    axum::serve(listener, router(service))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
