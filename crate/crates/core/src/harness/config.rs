//! TOML run configuration shared by the batch driver and the service.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctxref::CtxRefParams;
use crate::dialog::{DialogParams, MAX_ROUNDS};
use crate::error::{Error, Result};
use crate::fusion::FusionPolicy;
use crate::gallery::{ingest_gallery, Gallery, ImageId};
use crate::oracles::{
    ImageCache, OracleSuite, RemoteEndpoint, RemoteImageEncoder, RemoteImageGenerator,
    RemoteLanguageModel, RemoteTextEncoder, RemoteUserSimulator, Role, SyntheticWorld,
    TemplateStore,
};
use crate::session::EngineSettings;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Manifest path. Without it, `[synthetic]` supplies the full world gallery.
    pub gallery: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub rounds: usize,
    /// `"dial_num,image_num"`.
    pub policy: String,
    pub stop_on_hit: bool,
    /// Worker threads for batch sessions; 0 picks the CPU count.
    pub workers: usize,
    pub persist_sessions: bool,
    pub templates_dir: Option<PathBuf>,
    pub targets: TargetsConfig,
    pub synthetic: Option<SyntheticConfig>,
    pub ctxref: CtxRefParams,
    pub dialog: DialogParams,
    pub image: ImageConfig,
    pub oracles: BTreeMap<Role, OracleConfig>,
    pub server: ServerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            gallery: None,
            out_dir: PathBuf::from("out"),
            rounds: MAX_ROUNDS,
            policy: FusionPolicy::default().to_string(),
            stop_on_hit: false,
            workers: 0,
            persist_sessions: false,
            templates_dir: None,
            targets: TargetsConfig::default(),
            synthetic: None,
            ctxref: CtxRefParams::default(),
            dialog: DialogParams::default(),
            image: ImageConfig::default(),
            oracles: BTreeMap::new(),
            server: ServerConfig::default(),
        }
    }
}

/// Either explicit ids, or a seeded sample of `sample` gallery images.
/// With neither, every gallery image is a target.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetsConfig {
    pub ids: Option<Vec<String>>,
    pub sample: Option<usize>,
    pub seed: u64,
    /// Opening descriptions by target id, overriding the default.
    pub descriptions: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub bits: usize,
    pub diffs_per_answer: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            bits: 10,
            diffs_per_answer: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageConfig {
    pub generator_seed: u64,
    pub cache_dir: PathBuf,
}

impl Default for ImageConfig {
    fn default() -> Self {
        ImageConfig {
            generator_seed: 0,
            cache_dir: PathBuf::from("cache"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    Synthetic,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub kind: OracleKind,
    pub base_url: Option<String>,
    pub timeout_s: f64,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub token: Option<String>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            kind: OracleKind::Synthetic,
            base_url: None,
            timeout_s: 30.0,
            max_retries: 3,
            backoff_ms: 500,
            token: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub bind: String,
    pub cors_origin: Option<String>,
    pub sessions_dir: PathBuf,
    /// Shared bearer token; unset disables the check.
    pub token: Option<String>,
    pub static_dir: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            bind: "127.0.0.1:8080".into(),
            cors_origin: None,
            sessions_dir: PathBuf::from("sessions"),
            token: None,
            static_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative paths inside it resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            cfg.rebase(base);
        }
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(g) = &mut self.gallery {
            fix(g);
        }
        if let Some(t) = &mut self.templates_dir {
            fix(t);
        }
        if let Some(s) = &mut self.server.static_dir {
            fix(s);
        }
        fix(&mut self.out_dir);
        fix(&mut self.image.cache_dir);
        fix(&mut self.server.sessions_dir);
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.rounds > MAX_ROUNDS {
            return Err(Error::Config(format!("rounds must be in 1..={MAX_ROUNDS}")));
        }
        self.fusion_policy()?;
        self.ctxref
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if let Some(s) = &self.synthetic {
            if !(1..=24).contains(&s.bits) {
                return Err(Error::Config("synthetic.bits must be in 1..=24".into()));
            }
        }
        if self.gallery.is_none() && self.synthetic.is_none() {
            return Err(Error::Config("set `gallery` or a [synthetic] section".into()));
        }
        for (role, o) in &self.oracles {
            match o.kind {
                OracleKind::Remote if o.base_url.is_none() => {
                    return Err(Error::Config(format!("oracles.{role}: remote needs base_url")))
                }
                OracleKind::Synthetic if self.synthetic.is_none() => {
                    return Err(Error::Config(format!(
                        "oracles.{role}: synthetic oracles need a [synthetic] section"
                    )))
                }
                _ => {}
            }
            if !(o.timeout_s.is_finite() && o.timeout_s > 0.0) {
                return Err(Error::Config(format!("oracles.{role}: timeout_s must be positive")));
            }
        }
        if self.synthetic.is_none() {
            if let Some(role) = Role::ALL.iter().find(|r| {
                self.oracles
                    .get(r)
                    .is_none_or(|o| o.kind != OracleKind::Remote)
            }) {
                return Err(Error::Config(format!(
                    "no oracle configured for role {role} (add [oracles.{role}] or [synthetic])"
                )));
            }
        }
        if matches!(&self.targets.ids, Some(ids) if ids.is_empty()) || self.targets.sample == Some(0) {
            return Err(Error::Config("target list is empty".into()));
        }
        Ok(())
    }

    pub fn fusion_policy(&self) -> Result<FusionPolicy> {
        self.policy
            .parse()
            .map_err(|e: Error| Error::Config(e.to_string()))
    }

    pub fn world(&self) -> Option<SyntheticWorld> {
        self.synthetic
            .as_ref()
            .map(|s| SyntheticWorld::new(s.bits).with_diffs_per_answer(s.diffs_per_answer))
    }

    pub fn load_gallery(&self) -> Result<Gallery> {
        match (&self.gallery, self.world()) {
            (Some(path), _) => ingest_gallery(path),
            (None, Some(w)) => Ok(w.gallery()),
            (None, None) => Err(Error::Config("no gallery configured".into())),
        }
    }

    pub fn templates(&self) -> Result<TemplateStore> {
        match &self.templates_dir {
            Some(dir) => TemplateStore::load_dir(dir).map_err(|e| Error::Config(e.to_string())),
            None => Ok(TemplateStore::builtin()),
        }
    }

    fn endpoint(&self, role: Role, o: &OracleConfig) -> RemoteEndpoint {
        let mut ep = RemoteEndpoint::new(role, o.base_url.clone().unwrap_or_default());
        ep.timeout = Duration::from_secs_f64(o.timeout_s);
        ep.max_retries = o.max_retries;
        ep.backoff_base = Duration::from_millis(o.backoff_ms);
        ep.auth_token = o.token.clone();
        ep
    }

    /// The synthetic suite (when configured) with each remote role swapped in.
    pub fn oracle_suite(&self) -> Result<OracleSuite> {
        let templates = self.templates()?;
        let cache = ImageCache::new(&self.image.cache_dir);
        let mut suite = match self.world() {
            Some(w) => OracleSuite::synthetic(w),
            None => {
                // validate() guarantees every role is remote here
                let ep = |role: Role| self.endpoint(role, &self.oracles[&role]);
                return Ok(OracleSuite {
                    text_encoder: Arc::new(RemoteTextEncoder::new(ep(Role::TextEncoder))),
                    image_encoder: Arc::new(RemoteImageEncoder::new(ep(Role::ImageEncoder), cache.clone())),
                    questioner: Arc::new(RemoteLanguageModel::new(ep(Role::Questioner))),
                    user_simulator: Arc::new(RemoteUserSimulator::new(
                        ep(Role::UserSimulator),
                        cache.clone(),
                        templates.clone(),
                    )),
                    image_generator: Arc::new(RemoteImageGenerator::new(ep(Role::ImageGenerator), cache)),
                    summarizer: Arc::new(RemoteLanguageModel::new(ep(Role::Summarizer))),
                    templates,
                });
            }
        };
        suite.templates = templates.clone();
        for (&role, o) in &self.oracles {
            if o.kind != OracleKind::Remote {
                continue;
            }
            let ep = self.endpoint(role, o);
            match role {
                Role::TextEncoder => suite.text_encoder = Arc::new(RemoteTextEncoder::new(ep)),
                Role::ImageEncoder => {
                    suite.image_encoder = Arc::new(RemoteImageEncoder::new(ep, cache.clone()))
                }
                Role::Questioner => suite.questioner = Arc::new(RemoteLanguageModel::new(ep)),
                Role::UserSimulator => {
                    suite.user_simulator =
                        Arc::new(RemoteUserSimulator::new(ep, cache.clone(), templates.clone()))
                }
                Role::ImageGenerator => {
                    suite.image_generator = Arc::new(RemoteImageGenerator::new(ep, cache.clone()))
                }
                Role::Summarizer => suite.summarizer = Arc::new(RemoteLanguageModel::new(ep)),
            }
        }
        Ok(suite)
    }

    pub fn engine_settings(&self) -> Result<EngineSettings> {
        Ok(EngineSettings {
            ctxref: self.ctxref.clone(),
            dialog: self.dialog.clone(),
            policy: self.fusion_policy()?,
            round_cap: self.rounds,
            generator_seed: self.image.generator_seed,
        })
    }

    /// Resolves the target list against the gallery, in a stable order.
    pub fn resolve_targets(&self, g: &Gallery) -> Result<Vec<ImageId>> {
        let ids: Vec<ImageId> = match (&self.targets.ids, self.targets.sample) {
            (Some(ids), _) => ids.iter().map(|s| ImageId::new(s.as_str())).collect(),
            (None, Some(n)) => {
                if n > g.len() {
                    return Err(Error::Config(format!(
                        "cannot sample {n} targets from a gallery of {}",
                        g.len()
                    )));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(self.targets.seed);
                let mut picked = sample(&mut rng, g.len(), n).into_vec();
                picked.sort_unstable();
                picked.into_iter().map(|i| g.entry(i).id.clone()).collect()
            }
            (None, None) => g.entries().iter().map(|e| e.id.clone()).collect(),
        };
        if ids.is_empty() {
            return Err(Error::Config("target list is empty".into()));
        }
        if let Some(bad) = ids.iter().find(|id| g.index_of(id).is_none()) {
            return Err(Error::Config(format!("target {bad} is not in the gallery")));
        }
        Ok(ids)
    }

    /// D₀ for a target: an explicit override, else the synthetic world's
    /// fact-free opener, else the target's gallery caption.
    pub fn opening_description(&self, g: &Gallery, target: &ImageId) -> Result<String> {
        if let Some(d) = self.targets.descriptions.get(target.as_str()) {
            return Ok(d.clone());
        }
        if let Some(w) = self.world() {
            return Ok(w.initial_description());
        }
        let idx = g
            .index_of(target)
            .ok_or_else(|| Error::UnknownTarget(target.to_string()))?;
        Ok(g.entry(idx).caption.clone())
    }
}
