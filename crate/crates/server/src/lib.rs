//! HTTP front ends: the live-session API and the stub oracle server.

pub mod api;
pub mod stub;

use std::sync::Arc;

use axum::http::{HeaderValue, Method};
use axum::Router;
use dir_tir_core::harness::RunConfig;
use dir_tir_core::{Engine, Error, Result, SessionStore};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};
use tower_http::services::ServeDir;

pub use api::{api_router, AppState};
pub use stub::{stub_router, StubState};

/// Builds the service for a config: engine with its session store, CORS and
/// optional static files for the web client.
pub fn build_service(cfg: &RunConfig) -> Result<(AppState, Router)> {
    let gallery = Arc::new(cfg.load_gallery()?);
    let engine = Engine::new(gallery, cfg.oracle_suite()?, cfg.engine_settings()?)?
        .with_store(SessionStore::new(&cfg.server.sessions_dir));
    let app = AppState::new(engine, cfg.server.token.clone());
    let mut router = api_router(app.clone());
    if let Some(origin) = &cfg.server.cors_origin {
        let allow = if origin == "*" {
            AllowOrigin::from(Any)
        } else {
            let v = HeaderValue::from_str(origin)
                .map_err(|_| Error::Config(format!("invalid cors_origin {origin:?}")))?;
            AllowOrigin::exact(v)
        };
        router = router.layer(
            CorsLayer::new()
                .allow_origin(allow)
                .allow_methods([Method::GET, Method::POST])
                .allow_headers(Any),
        );
    }
    if let Some(dir) = &cfg.server.static_dir {
        router = router.fallback_service(ServeDir::new(dir));
    }
    Ok((app, router))
}

/// Serves `router` until the process is stopped.
pub async fn serve(listener: tokio::net::TcpListener, router: Router) -> std::io::Result<()> {
    axum::serve(listener, router).await
}
