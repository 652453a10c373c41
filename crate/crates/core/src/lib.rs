//! Conversational text-to-image retrieval.
//!
//! A session alternates two refiners over a fixed image gallery. The dialog
//! refiner asks clarifying questions grounded in a contextual reference and
//! rewrites the running description; the image refiner generates an image
//! from a prompt, asks how it differs from the target, and rewrites the
//! prompt. Each round both rankings are fused into ten candidates.
//!
//! All model roles sit behind [`oracles`] traits, with a deterministic
//! [`oracles::SyntheticWorld`] implementation and JSON-over-HTTP adapters.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ctxref;
pub mod dialog;
pub mod digest;
pub mod error;
pub mod fusion;
pub mod gallery;
pub mod harness;
pub mod image;
pub mod oracles;
pub mod respondent;
pub mod session;
pub mod vecsearch;

pub use ctxref::{obtain_contextual_reference, ContextualReference, CtxRefParams};
pub use dialog::{Description, DialogParams, QaPair, QaPhase, MAX_ROUNDS};
pub use error::{Error, Result};
pub use fusion::{fuse, CandidateSet, FusionPolicy, Provenance, RoundMeans, TurnMetrics, CANDIDATE_COUNT};
pub use gallery::{ingest_gallery, EmbeddingVector, Gallery, GalleryEntry, ImageId};
pub use image::{GenPrompt, GeneratedImage, DISCREPANCY_QUESTION};
pub use oracles::{ImageHandle, OracleError, OracleSuite, Role, SyntheticWorld};
pub use session::{
    AnswerStep, DiscrepancyStep, Engine, EngineSettings, PendingTurn, SessionEvent, SessionMode,
    SessionState, SessionStatus, SessionStore, TurnRecord,
};
pub use vecsearch::{rank_by_image, rank_by_text, Ranking};
