//! Contextual reference selection.
//!
//! Given the current description: embed it, take the `related_size` most
//! similar gallery images, score each image's caption by the entropy of its
//! softmax similarity over those images, cluster the images with k-means,
//! and keep the lowest-entropy caption of every non-empty cluster. The
//! selected captions ground the questioner.

pub mod kmeans;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::debug;

use crate::error::{Error, Result};
use crate::gallery::{dot, EmbeddingVector, Gallery, ImageId};
use crate::oracles::OracleSuite;
use crate::vecsearch::{rank_by_text, top_n, TopK};

pub use kmeans::{kmeans, KMeansResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CtxRefParams {
    pub related_size: usize,
    pub clusters: usize,
    pub temperature: f64,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for CtxRefParams {
    fn default() -> Self {
        CtxRefParams {
            related_size: 100,
            clusters: 10,
            temperature: 1.0,
            seed: 0,
            max_iter: 100,
            tol: 1e-6,
        }
    }
}

impl CtxRefParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParams(format!("ctxref: {m}")));
        if self.related_size == 0 || self.clusters == 0 {
            return bad("related_size and clusters must be positive");
        }
        if self.clusters > self.related_size {
            return bad("clusters must not exceed related_size");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        if self.max_iter == 0 || !(self.tol > 0.0) {
            return bad("max_iter and tol must be positive");
        }
        Ok(())
    }
}

/// Caption entropies in nats, aligned with `TopK::indices`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyTable {
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ContextualReference {
    pub captions: Vec<String>,
    pub member_ids: Vec<ImageId>,
}

impl ContextualReference {
    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }
}

/// Every intermediate of one selection run.
#[derive(Debug, Clone, PartialEq)]
pub struct CtxRefTrace {
    pub query: EmbeddingVector,
    pub topk: TopK,
    pub entropy: EntropyTable,
    pub clustering: KMeansResult,
    /// Per non-empty cluster, in cluster order: the chosen position within `topk`.
    pub witnesses: Vec<usize>,
    pub reference: ContextualReference,
}

/// Shannon entropy (nats) of `softmax(scores / temperature)`, clamped to `[0, ln n]`.
pub fn softmax_entropy(scores: &[f64], temperature: f64) -> f64 {
    let z: Vec<f64> = scores.iter().map(|s| s / temperature).collect();
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    let h: f64 = exps
        .iter()
        .map(|e| e / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    h.clamp(0.0, (scores.len() as f64).ln())
}

pub fn caption_entropy(
    topk: &TopK,
    g: &Gallery,
    oracles: &OracleSuite,
    temperature: f64,
) -> Result<EntropyTable> {
    if topk.is_empty() {
        return Err(Error::InvalidParams("caption_entropy: empty top-k".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidParams("caption_entropy: temperature must be positive".into()));
    }
    let captions: Vec<EmbeddingVector> = topk
        .indices
        .par_iter()
        .map(|&i| oracles.embed_text(&g.entry(i).caption, g.dim()))
        .collect::<std::result::Result<_, _>>()?;
    let values = captions
        .iter()
        .map(|vc| {
            let sims: Vec<f64> = topk
                .indices
                .iter()
                .map(|&j| dot(vc.as_slice(), g.entry(j).embedding.as_slice()))
                .collect();
            softmax_entropy(&sims, temperature)
        })
        .collect();
    Ok(EntropyTable { values })
}

pub fn cluster_topk(topk: &TopK, g: &Gallery, params: &CtxRefParams) -> KMeansResult {
    let points: Vec<Vec<f64>> = topk
        .indices
        .iter()
        .map(|&i| {
            g.entry(i)
                .embedding
                .as_slice()
                .iter()
                .map(|&x| f64::from(x))
                .collect()
        })
        .collect();
    kmeans(&points, params.clusters, params.seed, params.max_iter, params.tol)
}

/// Runs the full selection and keeps every intermediate. `round` is accepted
/// for interface compatibility and does not influence the result.
pub fn trace_contextual_reference(
    description: &str,
    round: usize,
    g: &Gallery,
    oracles: &OracleSuite,
    params: &CtxRefParams,
) -> Result<CtxRefTrace> {
    if description.trim().is_empty() {
        return Err(Error::EmptyDescription);
    }
    if g.is_empty() {
        return Err(Error::EmptyGallery);
    }
    params.validate()?;
    debug!(round, "selecting contextual reference (round is not used)");

    let query = oracles.embed_text(description, g.dim())?;
    let ranking = rank_by_text(g, &query)?;
    let topk = top_n(&ranking, params.related_size);
    let entropy = caption_entropy(&topk, g, oracles, params.temperature)?;
    let clustering = cluster_topk(&topk, g, params);

    let mut witnesses = Vec::new();
    for c in 0..clustering.k {
        let best = clustering
            .labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == c)
            .map(|(pos, _)| pos)
            .min_by(|&a, &b| entropy.values[a].total_cmp(&entropy.values[b]).then(a.cmp(&b)));
        if let Some(pos) = best {
            witnesses.push(pos);
        }
    }
    let reference = ContextualReference {
        captions: witnesses
            .iter()
            .map(|&p| g.entry(topk.indices[p]).caption.clone())
            .collect(),
        member_ids: witnesses
            .iter()
            .map(|&p| g.entry(topk.indices[p]).id.clone())
            .collect(),
    };
    Ok(CtxRefTrace {
        query,
        topk,
        entropy,
        clustering,
        witnesses,
        reference,
    })
}

pub fn obtain_contextual_reference(
    description: &str,
    round: usize,
    g: &Gallery,
    oracles: &OracleSuite,
    params: &CtxRefParams,
) -> Result<ContextualReference> {
    trace_contextual_reference(description, round, g, oracles, params).map(|t| t.reference)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gallery::GalleryEntry;
    use crate::oracles::{OracleResult, SyntheticWorld, TextEncoder};
    use std::sync::Arc;

    struct FixedEncoder(Vec<f32>);

    impl TextEncoder for FixedEncoder {
        fn encode_text(&self, _text: &str) -> OracleResult<EmbeddingVector> {
            Ok(EmbeddingVector::normalized(&self.0, "fixed").unwrap())
        }
    }

    fn suite_with_encoder(enc: Vec<f32>) -> OracleSuite {
        let mut s = OracleSuite::synthetic(SyntheticWorld::new(3));
        s.text_encoder = Arc::new(FixedEncoder(enc));
        s
    }

    fn gallery(rows: &[Vec<f32>]) -> Gallery {
        Gallery::from_entries(
            rows.iter()
                .enumerate()
                .map(|(i, r)| GalleryEntry {
                    id: ImageId::new(format!("img_{i}")),
                    caption: format!("caption {i}"),
                    embedding: EmbeddingVector::normalized(r, "t").unwrap(),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn orthogonal_captions_give_uniform_entropy() {
        let g = gallery(&[
            vec![1.0, 0.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0, 0.0],
        ]);
        let oracles = suite_with_encoder(vec![0.0, 0.0, 0.0, 0.0, 1.0]);
        let topk = TopK { k: 4, indices: vec![0, 1, 2, 3] };
        let t = caption_entropy(&topk, &g, &oracles, 1.0).unwrap();
        for h in t.values {
            assert!((h - 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn single_outcome_has_zero_entropy() {
        let g = gallery(&[vec![1.0, 0.0]]);
        let oracles = suite_with_encoder(vec![1.0, 0.0]);
        let t = caption_entropy(&TopK { k: 1, indices: vec![0] }, &g, &oracles, 1.0).unwrap();
        assert_eq!(t.values, vec![0.0]);
    }

    #[test]
    fn forced_path_on_single_image() {
        let g = gallery(&[vec![1.0, 0.0]]);
        let oracles = suite_with_encoder(vec![1.0, 0.0]);
        let params = CtxRefParams { related_size: 1, clusters: 1, ..Default::default() };
        let r = obtain_contextual_reference("anything", 1, &g, &oracles, &params).unwrap();
        assert_eq!(r.captions, vec!["caption 0".to_string()]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let g = gallery(&[vec![1.0, 0.0]]);
        let oracles = suite_with_encoder(vec![1.0, 0.0]);
        let params = CtxRefParams::default();
        assert!(matches!(
            obtain_contextual_reference("  ", 1, &g, &oracles, &params),
            Err(Error::EmptyDescription)
        ));
        let empty = Gallery::from_entries(vec![]).unwrap();
        assert!(matches!(
            obtain_contextual_reference("x", 1, &empty, &oracles, &params),
            Err(Error::EmptyGallery)
        ));
        let bad = CtxRefParams { clusters: 5, related_size: 2, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad_t = CtxRefParams { temperature: 0.0, ..Default::default() };
        assert!(bad_t.validate().is_err());
    }

    #[test]
    fn identical_captions_fall_back_to_topk_position() {
        // every caption encodes to the same vector, so entropies tie and the
        // earliest top-k member of each cluster wins
        let mut rows = Vec::new();
        for c in 0..3 {
            for j in 0..10 {
                let mut r = vec![0.0f32; 4];
                r[c] = 10.0;
                r[3] = 0.01 * j as f32;
                rows.push(r);
            }
        }
        let g = gallery(&rows);
        let oracles = suite_with_encoder(vec![1.0, 1.0, 1.0, 0.0]);
        let params = CtxRefParams { related_size: 30, clusters: 3, ..Default::default() };
        let t = trace_contextual_reference("x", 1, &g, &oracles, &params).unwrap();
        assert_eq!(t.reference.captions.len(), 3);
        for (c, &w) in t.witnesses.iter().enumerate() {
            let first = t.clustering.labels.iter().position(|&l| l == c).unwrap();
            assert_eq!(w, first);
        }
    }
}
