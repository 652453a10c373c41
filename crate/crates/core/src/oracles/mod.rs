//! Model-role interfaces and their implementations.
//!
//! Six roles drive the engine: text encoder, image encoder, questioner
//! (also used as the question filter), user simulator, image generator and
//! summarizer. Each role has a deterministic synthetic implementation and a
//! JSON-over-HTTP remote adapter; both sit behind the same traits.

mod cache;
mod remote;
mod synthetic;
mod template;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gallery::{EmbeddingVector, ImageId};

pub use cache::ImageCache;
pub use remote::{
    RemoteEndpoint, RemoteImageEncoder, RemoteImageGenerator, RemoteLanguageModel,
    RemoteTextEncoder, RemoteUserSimulator, WireRequest, WireResponse,
};
pub use synthetic::{Attribute, Facts, SyntheticOracle, SyntheticWorld, NO_DIFFERENCES};
pub use template::{Prompt, TemplateError, TemplateStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    TextEncoder,
    ImageEncoder,
    Questioner,
    UserSimulator,
    ImageGenerator,
    Summarizer,
}

impl Role {
    pub const ALL: [Role; 6] = [
        Role::TextEncoder,
        Role::ImageEncoder,
        Role::Questioner,
        Role::UserSimulator,
        Role::ImageGenerator,
        Role::Summarizer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::TextEncoder => "text_encoder",
            Role::ImageEncoder => "image_encoder",
            Role::Questioner => "questioner",
            Role::UserSimulator => "user_simulator",
            Role::ImageGenerator => "image_generator",
            Role::Summarizer => "summarizer",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum OracleError {
    #[error("{role}: request failed after {attempts} attempt(s): {message}")]
    Transport {
        role: Role,
        attempts: u32,
        message: String,
    },
    #[error("{role}: malformed payload: {message}")]
    Malformed { role: Role, message: String },
    #[error("{role}: expected a {expected}-dimensional vector, got {actual}")]
    WrongDimension {
        role: Role,
        expected: usize,
        actual: usize,
    },
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("{role}: {message}")]
    Unavailable { role: Role, message: String },
}

impl OracleError {
    pub fn role(&self) -> Option<Role> {
        match self {
            OracleError::Transport { role, .. }
            | OracleError::Malformed { role, .. }
            | OracleError::WrongDimension { role, .. }
            | OracleError::Unavailable { role, .. } => Some(*role),
            OracleError::Template(_) => None,
        }
    }
}

pub type OracleResult<T> = Result<T, OracleError>;

/// Opaque reference to a generated image, resolvable by the generator.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageHandle(pub String);

impl ImageHandle {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ImageHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub trait TextEncoder: Send + Sync {
    fn encode_text(&self, text: &str) -> OracleResult<EmbeddingVector>;
}

pub trait ImageEncoder: Send + Sync {
    fn encode_image(&self, handle: &ImageHandle) -> OracleResult<EmbeddingVector>;
}

/// Text completion over a rendered prompt template.
pub trait LanguageModel: Send + Sync {
    fn complete(&self, prompt: &Prompt) -> OracleResult<String>;
}

/// Stands in for the human: answers from the target image it alone knows.
pub trait UserSimulator: Send + Sync {
    fn answer(&self, target: &ImageId, question: &str) -> OracleResult<String>;

    fn describe_differences(
        &self,
        target: &ImageId,
        generated: &ImageHandle,
        question: &str,
    ) -> OracleResult<String>;
}

pub trait ImageGenerator: Send + Sync {
    fn generate(&self, prompt: &str, seed: u64) -> OracleResult<ImageHandle>;

    /// Raw bytes of a previously generated image, if still available.
    fn image_bytes(&self, handle: &ImageHandle) -> Option<Vec<u8>>;
}

/// The full set of model roles an engine run needs.
#[derive(Clone)]
pub struct OracleSuite {
    pub text_encoder: Arc<dyn TextEncoder>,
    pub image_encoder: Arc<dyn ImageEncoder>,
    pub questioner: Arc<dyn LanguageModel>,
    pub user_simulator: Arc<dyn UserSimulator>,
    pub image_generator: Arc<dyn ImageGenerator>,
    pub summarizer: Arc<dyn LanguageModel>,
    pub templates: TemplateStore,
}

impl fmt::Debug for OracleSuite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OracleSuite").finish_non_exhaustive()
    }
}

impl OracleSuite {
    /// Every role served by one synthetic world.
    pub fn synthetic(world: SyntheticWorld) -> Self {
        let oracle = Arc::new(SyntheticOracle::new(world));
        OracleSuite {
            text_encoder: oracle.clone(),
            image_encoder: oracle.clone(),
            questioner: oracle.clone(),
            user_simulator: oracle.clone(),
            image_generator: oracle.clone(),
            summarizer: oracle,
            templates: TemplateStore::builtin(),
        }
    }

    pub fn with_templates(mut self, templates: TemplateStore) -> Self {
        self.templates = templates;
        self
    }

    /// Encodes text and checks it against the gallery dimension.
    pub fn embed_text(&self, text: &str, dim: usize) -> OracleResult<EmbeddingVector> {
        let v = self.text_encoder.encode_text(text)?;
        check_dim(Role::TextEncoder, v, dim)
    }

    pub fn embed_image(&self, handle: &ImageHandle, dim: usize) -> OracleResult<EmbeddingVector> {
        let v = self.image_encoder.encode_image(handle)?;
        check_dim(Role::ImageEncoder, v, dim)
    }
}

fn check_dim(role: Role, v: EmbeddingVector, dim: usize) -> OracleResult<EmbeddingVector> {
    if v.dim() != dim {
        return Err(OracleError::WrongDimension {
            role,
            expected: dim,
            actual: v.dim(),
        });
    }
    Ok(v)
}
