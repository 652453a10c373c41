//! JSON-over-HTTP adapters. One POST per call to the role's `base_url`:
//! request `{role, template, bindings, text, image_b64, seed}` (unused fields
//! omitted), response `{text | vector | image_b64}`.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use rand::Rng;
use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

use super::{
    ImageCache, ImageEncoder, ImageGenerator, ImageHandle, LanguageModel, OracleError,
    OracleResult, Prompt, Role, TemplateStore, TextEncoder, UserSimulator,
};
use crate::gallery::{EmbeddingVector, ImageId};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub role: Option<Role>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub bindings: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_b64: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vector: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_b64: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteEndpoint {
    pub base_url: String,
    pub role: Role,
    pub timeout: Duration,
    pub max_retries: u32,
    /// First retry waits about this long; each further retry doubles it (±50% jitter).
    pub backoff_base: Duration,
    pub auth_token: Option<String>,
}

impl RemoteEndpoint {
    pub fn new(role: Role, base_url: impl Into<String>) -> Self {
        RemoteEndpoint {
            base_url: base_url.into(),
            role,
            timeout: Duration::from_secs(30),
            max_retries: 3,
            backoff_base: Duration::from_millis(500),
            auth_token: None,
        }
    }
}

#[derive(Debug, Clone)]
struct Client {
    endpoint: RemoteEndpoint,
    agent: ureq::Agent,
}

impl Client {
    fn new(endpoint: RemoteEndpoint) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(endpoint.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Client { endpoint, agent }
    }

    fn role(&self) -> Role {
        self.endpoint.role
    }

    fn call(&self, mut body: WireRequest) -> OracleResult<WireResponse> {
        let ep = &self.endpoint;
        body.role = Some(ep.role);
        let attempts_allowed = ep.max_retries + 1;
        let mut last_error = String::new();
        for attempt in 1..=attempts_allowed {
            if attempt > 1 {
                let factor = 2f64.powi(attempt as i32 - 2) * rand::rng().random_range(0.5..1.5);
                std::thread::sleep(ep.backoff_base.mul_f64(factor));
            }
            let mut req = self.agent.post(&ep.base_url);
            if let Some(token) = &ep.auth_token {
                req = req.header("Authorization", format!("Bearer {token}"));
            }
            debug!(role = %ep.role, attempt, url = %ep.base_url, "oracle request");
            match req.send_json(&body) {
                Ok(mut resp) if resp.status().is_success() => {
                    return resp.body_mut().read_json::<WireResponse>().map_err(|e| {
                        OracleError::Malformed {
                            role: ep.role,
                            message: e.to_string(),
                        }
                    });
                }
                Ok(resp) => last_error = format!("HTTP {}", resp.status().as_u16()),
                Err(e) => last_error = e.to_string(),
            }
            warn!(role = %ep.role, attempt, error = %last_error, "oracle request failed");
        }
        Err(OracleError::Transport {
            role: ep.role,
            attempts: attempts_allowed,
            message: last_error,
        })
    }

    fn text(&self, resp: WireResponse) -> OracleResult<String> {
        resp.text.ok_or_else(|| OracleError::Malformed {
            role: self.role(),
            message: "response has no `text` field".into(),
        })
    }

    fn vector(&self, resp: WireResponse) -> OracleResult<EmbeddingVector> {
        let raw = resp.vector.ok_or_else(|| OracleError::Malformed {
            role: self.role(),
            message: "response has no `vector` field".into(),
        })?;
        EmbeddingVector::normalized(&raw, self.role().as_str()).map_err(|e| OracleError::Malformed {
            role: self.role(),
            message: e.to_string(),
        })
    }
}

fn cached_bytes(cache: &ImageCache, role: Role, handle: &ImageHandle) -> OracleResult<String> {
    cache
        .get(handle)
        .map(|b| B64.encode(b))
        .ok_or_else(|| OracleError::Malformed {
            role,
            message: format!("image {handle} is not in the cache"),
        })
}

/// Text embeddings are memoized: gallery captions are re-encoded every round.
#[derive(Debug, Clone)]
pub struct RemoteTextEncoder {
    client: Client,
    memo: Arc<Mutex<HashMap<String, EmbeddingVector>>>,
}

impl RemoteTextEncoder {
    /// Memo entries kept before the memo is cleared.
    pub const MEMO_CAPACITY: usize = 65_536;

    pub fn new(endpoint: RemoteEndpoint) -> Self {
        RemoteTextEncoder {
            client: Client::new(endpoint),
            memo: Arc::default(),
        }
    }
}

impl TextEncoder for RemoteTextEncoder {
    fn encode_text(&self, text: &str) -> OracleResult<EmbeddingVector> {
        if let Some(v) = self.memo.lock().unwrap_or_else(|e| e.into_inner()).get(text) {
            return Ok(v.clone());
        }
        let resp = self.client.call(WireRequest {
            text: Some(text.to_string()),
            ..Default::default()
        })?;
        let v = self.client.vector(resp)?;
        let mut memo = self.memo.lock().unwrap_or_else(|e| e.into_inner());
        if memo.len() >= Self::MEMO_CAPACITY {
            memo.clear();
        }
        memo.insert(text.to_string(), v.clone());
        Ok(v)
    }
}

#[derive(Debug, Clone)]
pub struct RemoteImageEncoder {
    client: Client,
    cache: ImageCache,
}

impl RemoteImageEncoder {
    pub fn new(endpoint: RemoteEndpoint, cache: ImageCache) -> Self {
        RemoteImageEncoder {
            client: Client::new(endpoint),
            cache,
        }
    }
}

impl ImageEncoder for RemoteImageEncoder {
    fn encode_image(&self, handle: &ImageHandle) -> OracleResult<EmbeddingVector> {
        let image_b64 = cached_bytes(&self.cache, self.client.role(), handle)?;
        let resp = self.client.call(WireRequest {
            image_b64: Some(image_b64),
            ..Default::default()
        })?;
        self.client.vector(resp)
    }
}

/// Questioner or summarizer behind an HTTP endpoint.
#[derive(Debug, Clone)]
pub struct RemoteLanguageModel(Client);

impl RemoteLanguageModel {
    pub fn new(endpoint: RemoteEndpoint) -> Self {
        RemoteLanguageModel(Client::new(endpoint))
    }
}

impl LanguageModel for RemoteLanguageModel {
    fn complete(&self, prompt: &Prompt) -> OracleResult<String> {
        let resp = self.0.call(WireRequest {
            template: Some(prompt.template.clone()),
            bindings: prompt.bindings.clone(),
            text: Some(prompt.text.clone()),
            ..Default::default()
        })?;
        self.0.text(resp)
    }
}

#[derive(Debug, Clone)]
pub struct RemoteUserSimulator {
    client: Client,
    cache: ImageCache,
    templates: TemplateStore,
}

impl RemoteUserSimulator {
    pub fn new(endpoint: RemoteEndpoint, cache: ImageCache, templates: TemplateStore) -> Self {
        RemoteUserSimulator {
            client: Client::new(endpoint),
            cache,
            templates,
        }
    }

    fn request(&self, template: &str, target: &ImageId, question: &str) -> OracleResult<WireRequest> {
        let prompt = self.templates.render(
            template,
            [("question", question), ("target", target.as_str())],
        )?;
        Ok(WireRequest {
            template: Some(prompt.template),
            bindings: prompt.bindings,
            text: Some(prompt.text),
            ..Default::default()
        })
    }
}

impl UserSimulator for RemoteUserSimulator {
    fn answer(&self, target: &ImageId, question: &str) -> OracleResult<String> {
        let req = self.request("answer", target, question)?;
        let resp = self.client.call(req)?;
        self.client.text(resp)
    }

    fn describe_differences(
        &self,
        target: &ImageId,
        generated: &ImageHandle,
        question: &str,
    ) -> OracleResult<String> {
        let mut req = self.request("discrepancy", target, question)?;
        req.image_b64 = Some(cached_bytes(&self.cache, self.client.role(), generated)?);
        let resp = self.client.call(req)?;
        self.client.text(resp)
    }
}

/// Generator whose handles are the SHA-256 of the returned image bytes.
#[derive(Debug, Clone)]
pub struct RemoteImageGenerator {
    client: Client,
    cache: ImageCache,
}

impl RemoteImageGenerator {
    pub fn new(endpoint: RemoteEndpoint, cache: ImageCache) -> Self {
        RemoteImageGenerator {
            client: Client::new(endpoint),
            cache,
        }
    }
}

impl ImageGenerator for RemoteImageGenerator {
    fn generate(&self, prompt: &str, seed: u64) -> OracleResult<ImageHandle> {
        if let Some(handle) = self.cache.lookup(prompt, seed) {
            debug!(%handle, "generated image served from cache");
            return Ok(handle);
        }
        let resp = self.client.call(WireRequest {
            text: Some(prompt.to_string()),
            seed: Some(seed),
            ..Default::default()
        })?;
        let role = self.client.role();
        let encoded = resp.image_b64.ok_or_else(|| OracleError::Malformed {
            role,
            message: "response has no `image_b64` field".into(),
        })?;
        let bytes = B64.decode(encoded).map_err(|e| OracleError::Malformed {
            role,
            message: e.to_string(),
        })?;
        self.cache
            .put(&bytes, prompt, seed)
            .map_err(|e| OracleError::Unavailable {
                role,
                message: format!("cannot write image cache: {e}"),
            })
    }

    fn image_bytes(&self, handle: &ImageHandle) -> Option<Vec<u8>> {
        self.cache.get(handle)
    }
}
