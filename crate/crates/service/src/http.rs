//! HTTP API: `POST /ask`, `GET /trace/{id}`, `GET /schema/{db}`.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use tokio::sync::Semaphore;

use crate::ask::{ask, AskError, AskRequest, ErrorBody};
use crate::registry::Registry;
use crate::schema::schema_view;
use crate::store::TraceStore;

struct Shared {
    registry: Registry,
    traces: TraceStore,
    workers: Semaphore,
}

/// Cheap-to-clone handle on the registry, the trace store and the worker
/// permits.
#[derive(Clone)]
pub struct App(Arc<Shared>);

impl App {
    /// `workers` bounds how many questions run at once.
    pub fn new(registry: Registry, traces: TraceStore, workers: usize) -> Self {
        Self(Arc::new(Shared { registry, traces, workers: Semaphore::new(workers.max(1)) }))
    }

    pub fn registry(&self) -> &Registry {
        &self.0.registry
    }

    pub fn traces(&self) -> &TraceStore {
        &self.0.traces
    }
}

fn error(status: StatusCode, body: ErrorBody) -> Response {
    (status, Json(body)).into_response()
}

fn new_trace_id() -> String {
    uuid::Uuid::new_v4().to_string()
}

async fn post_ask(State(app): State<App>, body: Result<Json<AskRequest>, JsonRejection>) -> Response {
    let req = match body {
        Ok(Json(req)) => req,
        Err(rejection) => return error(StatusCode::BAD_REQUEST, ErrorBody::new("malformed_request", rejection.body_text())),
    };
    let Ok(_permit) = app.0.workers.acquire().await else {
        return error(StatusCode::SERVICE_UNAVAILABLE, ErrorBody::new("shutting_down", "service is shutting down"));
    };
    let worker = app.clone();
    let result = tokio::task::spawn_blocking(move || ask(&worker.0.registry, &worker.0.traces, &req, &new_trace_id())).await;
    match result {
        Ok(Ok(answer)) => (StatusCode::OK, Json(answer)).into_response(),
        Ok(Err(e)) => {
            if let AskError::Backend { class, message, .. } = &e {
                tracing::warn!(class = %class, error = %message, "ask failed");
            }
            let status = StatusCode::from_u16(e.http_status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
            error(status, ErrorBody::from(&e))
        }
        Err(join) => error(StatusCode::INTERNAL_SERVER_ERROR, ErrorBody::new("internal", join.to_string())),
    }
}

async fn get_trace(State(app): State<App>, Path(id): Path<String>) -> Response {
    match app.0.traces.get(&id) {
        Some(t) => Json(t.as_ref().clone()).into_response(),
        None => error(StatusCode::NOT_FOUND, ErrorBody::new("unknown_trace", format!("no trace with id `{id}`"))),
    }
}

async fn get_schema(State(app): State<App>, Path(db): Path<String>) -> Response {
    if app.0.registry.get(&db).is_none() {
        return error(StatusCode::NOT_FOUND, ErrorBody::new("unknown_db", format!("no database with id `{db}`")));
    }
    let worker = app.clone();
    let result = tokio::task::spawn_blocking(move || {
        let entry = worker.0.registry.get(&db).expect("checked above");
        schema_view(entry)
    })
    .await;
    match result {
        Ok(Ok(view)) => Json(view).into_response(),
        Ok(Err(e)) => error(StatusCode::BAD_GATEWAY, ErrorBody::new("db_unavailable", e.to_string())),
        Err(join) => error(StatusCode::INTERNAL_SERVER_ERROR, ErrorBody::new("internal", join.to_string())),
    }
}

pub fn router(app: App) -> Router {
    Router::new()
        .route("/ask", post(post_ask))
        .route("/trace/{id}", get(get_trace))
        .route("/schema/{db}", get(get_schema))
        .with_state(app)
}

/// Serves until Ctrl-C.
pub async fn serve(app: App, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(app))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
