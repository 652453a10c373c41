#![allow(dead_code)]

use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use dir_tir_core::{Engine, EngineSettings, OracleSuite, SessionStore, SyntheticWorld};
use dir_tir_server::{api_router, AppState};
use serde_json::Value;
use tower::ServiceExt;

pub struct Harness {
    pub world: SyntheticWorld,
    pub app: AppState,
    pub router: Router,
    pub _dir: tempfile::TempDir,
}

pub fn harness_with(bits: usize, suite: impl FnOnce(OracleSuite) -> OracleSuite, token: Option<&str>) -> Harness {
    let world = SyntheticWorld::new(bits);
    let dir = tempfile::tempdir().unwrap();
    let engine = Engine::new(
        Arc::new(world.gallery()),
        suite(OracleSuite::synthetic(world.clone())),
        EngineSettings::default(),
    )
    .unwrap()
    .with_store(SessionStore::new(dir.path()));
    let app = AppState::new(engine, token.map(str::to_string));
    Harness {
        world,
        router: api_router(app.clone()),
        app,
        _dir: dir,
    }
}

pub fn harness(bits: usize) -> Harness {
    harness_with(bits, |s| s, None)
}

pub struct Reply {
    pub status: StatusCode,
    pub headers: axum::http::HeaderMap,
    pub body: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap_or(Value::Null)
    }
}

pub async fn call(router: &Router, method: &str, uri: &str, body: Option<Value>) -> Reply {
    call_with(router, method, uri, body, None).await
}

pub async fn call_with(
    router: &Router,
    method: &str,
    uri: &str,
    body: Option<Value>,
    token: Option<&str>,
) -> Reply {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header(header::AUTHORIZATION, format!("Bearer {t}"));
    }
    let req = match body {
        Some(b) => req
            .header(header::CONTENT_TYPE, "application/json")
            .body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = router.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec();
    Reply {
        status,
        headers,
        body,
    }
}

/// Candidate lists are at most ten long with no repeated ids.
pub fn assert_candidates(v: &Value) {
    let ids: Vec<&str> = v
        .as_array()
        .expect("candidates array")
        .iter()
        .map(|c| c["id"].as_str().unwrap())
        .collect();
    assert!(ids.len() <= 10);
    let mut uniq = ids.clone();
    uniq.sort();
    uniq.dedup();
    assert_eq!(uniq.len(), ids.len());
}
