#![allow(dead_code)]

use std::path::PathBuf;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use ehrnav_service::config::DatabaseSection;
use ehrnav_service::{router, App, Registry, ServiceConfig, TraceStore};
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

/// Compares `actual` with `tests/golden/<name>`. With `UPDATE_GOLDEN=1`
/// the file is rewritten instead.
pub fn check_golden(name: &str, actual: &str) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("{}: {e} (run with UPDATE_GOLDEN=1 to create)", path.display()));
    assert!(expected == actual, "{} differs from the committed golden file:\n{actual}", path.display());
}

pub fn db(source: &str) -> DatabaseSection {
    DatabaseSection { id: None, source: source.into(), profile: None, notes: None }
}

/// Service over the named fixture databases with the bundled script.
pub fn fixture_app(sources: &[&str]) -> App {
    let config = ServiceConfig { databases: sources.iter().map(|s| db(s)).collect(), ..ServiceConfig::default() };
    App::new(Registry::build(&config).unwrap(), TraceStore::in_memory(), 4)
}

pub async fn send(app: &App, req: Request<Body>) -> (StatusCode, Value) {
    let resp = router(app.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let body = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap_or(Value::Null) };
    (status, body)
}

pub async fn post_raw(app: &App, body: &str) -> (StatusCode, Value) {
    let req = Request::post("/ask").header("content-type", "application/json").body(Body::from(body.to_owned())).unwrap();
    send(app, req).await
}

pub async fn post_ask(app: &App, body: Value) -> (StatusCode, Value) {
    post_raw(app, &body.to_string()).await
}

pub async fn get(app: &App, uri: &str) -> (StatusCode, Value) {
    send(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

/// Replaces every occurrence of `trace_id` with a placeholder.
pub fn redact(text: &str, trace_id: &str) -> String {
    text.replace(trace_id, "<trace-id>")
}
