//! Stub oracle server: serves every role of a [`SyntheticWorld`] over the
//! JSON wire protocol the remote adapters speak, so remote configurations
//! can be exercised without real models.

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use dir_tir_core::oracles::{
    LanguageModel, Prompt, SyntheticOracle, TextEncoder, UserSimulator,
    WireRequest, WireResponse,
};
use dir_tir_core::{ImageId, Role, SyntheticWorld};
use serde_json::json;

/// Failure injection: the first `fail_first` requests get a 503.
#[derive(Debug, Default)]
pub struct Faults {
    pub fail_first: AtomicUsize,
}

#[derive(Clone)]
pub struct StubState {
    oracle: Arc<SyntheticOracle>,
    faults: Arc<Faults>,
    requests: Arc<AtomicU64>,
}

impl StubState {
    pub fn new(world: SyntheticWorld) -> Self {
        StubState {
            oracle: Arc::new(SyntheticOracle::new(world)),
            faults: Arc::new(Faults::default()),
            requests: Arc::new(AtomicU64::new(0)),
        }
    }

    pub fn faults(&self) -> &Faults {
        &self.faults
    }

    /// Requests received so far, failed ones included.
    pub fn requests(&self) -> u64 {
        self.requests.load(Ordering::SeqCst)
    }
}

/// `POST /` dispatches on the request's `role`; `POST /{role}` works too.
pub fn stub_router(state: StubState) -> Router {
    Router::new()
        .route("/", post(handle))
        .route("/{role}", post(handle))
        .with_state(state)
}

/// Serves the stub on `127.0.0.1:<ephemeral>` from a dedicated thread for the
/// life of the process and returns its base URL.
pub fn spawn_background(state: StubState) -> std::io::Result<String> {
    let listener = std::net::TcpListener::bind("127.0.0.1:0")?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(4)
        .enable_all()
        .build()?;
    std::thread::Builder::new()
        .name("stub-oracle".into())
        .spawn(move || {
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener).expect("listener");
                let _ = axum::serve(listener, stub_router(state)).await;
            })
        })?;
    Ok(format!("http://{addr}"))
}

/// A request the stub cannot serve; answered with 400.
fn bad(message: impl Into<String>) -> String {
    message.into()
}

fn decode_image(req: &WireRequest, world: &SyntheticWorld) -> Result<dir_tir_core::oracles::Facts, String> {
    let raw = req
        .image_b64
        .as_deref()
        .ok_or_else(|| bad("missing image_b64"))?;
    let bytes = B64.decode(raw).map_err(|e| bad(e.to_string()))?;
    world
        .facts_from_bytes(&bytes)
        .ok_or_else(|| bad("image does not carry a synthetic pattern"))
}

async fn handle(State(s): State<StubState>, Json(req): Json<WireRequest>) -> Response {
    s.requests.fetch_add(1, Ordering::SeqCst);
    let injected = s
        .faults
        .fail_first
        .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
        .is_ok();
    if injected {
        return (StatusCode::SERVICE_UNAVAILABLE, Json(json!({ "error": "injected failure" }))).into_response();
    }
    match respond(&s.oracle, &req) {
        Ok(resp) => Json(resp).into_response(),
        Err(message) => (StatusCode::BAD_REQUEST, Json(json!({ "error": message }))).into_response(),
    }
}

fn respond(oracle: &SyntheticOracle, req: &WireRequest) -> Result<WireResponse, String> {
    let world = oracle.world();
    let oracle_err = |e: dir_tir_core::OracleError| bad(e.to_string());
    let text = || req.text.clone().ok_or_else(|| bad("missing text"));
    let binding = |name: &str| {
        req.bindings
            .get(name)
            .cloned()
            .ok_or_else(|| bad(format!("missing binding {name}")))
    };
    let role = req.role.ok_or_else(|| bad("missing role"))?;
    let mut out = WireResponse::default();
    match role {
        Role::TextEncoder => {
            let v = oracle.encode_text(&text()?).map_err(oracle_err)?;
            out.vector = Some(v.as_slice().to_vec());
        }
        Role::ImageEncoder => {
            let facts = decode_image(req, world)?;
            out.vector = Some(world.embed(&facts).as_slice().to_vec());
        }
        Role::Questioner | Role::Summarizer => {
            let prompt = Prompt {
                template: req.template.clone().ok_or_else(|| bad("missing template"))?,
                bindings: req.bindings.clone(),
                text: req.text.clone().unwrap_or_default(),
            };
            out.text = Some(oracle.complete(&prompt).map_err(oracle_err)?);
        }
        Role::UserSimulator => {
            let target = ImageId::new(binding("target")?);
            match req.template.as_deref() {
                Some("answer") => {
                    let q = binding("question")?;
                    out.text = Some(oracle.answer(&target, &q).map_err(oracle_err)?);
                }
                Some("discrepancy") => {
                    let have = decode_image(req, world)?;
                    let want = world
                        .facts_of_id(&target)
                        .ok_or_else(|| bad(format!("unknown target {target}")))?;
                    out.text = Some(world.describe_differences(&want, &have));
                }
                other => return Err(bad(format!("unknown user_simulator template {other:?}"))),
            }
        }
        Role::ImageGenerator => {
            let facts = world.parse_facts(&text()?);
            out.image_b64 = Some(B64.encode(world.render_svg(&facts)));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_bytes_round_trip_through_encoder() {
        let w = SyntheticWorld::new(3);
        let o = SyntheticOracle::new(w.clone());
        let gen = respond(
            &o,
            &WireRequest {
                role: Some(Role::ImageGenerator),
                text: Some("color=blue; size=small".into()),
                ..Default::default()
            },
        )
        .unwrap();
        let enc = respond(
            &o,
            &WireRequest {
                role: Some(Role::ImageEncoder),
                image_b64: gen.image_b64,
                ..Default::default()
            },
        )
        .unwrap();
        let expected = o.encode_text("color=blue; size=small").unwrap();
        assert_eq!(enc.vector.unwrap(), expected.as_slice());
        assert!(respond(&o, &WireRequest::default()).is_err());
    }
}
