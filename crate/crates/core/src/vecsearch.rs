//! Exact cosine-similarity ranking over a [`Gallery`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gallery::{dot, EmbeddingVector, Gallery, ImageId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankingSource {
    Dialog,
    Image,
    Fused,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub id: ImageId,
    /// Position of the image in the gallery's ingestion order.
    pub index: usize,
    pub score: f64,
}

/// Full ordering of the gallery: scores non-increasing, ties by ascending
/// gallery index, every image exactly once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub items: Vec<RankedItem>,
    pub source: RankingSource,
}

impl Ranking {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &ImageId> {
        self.items.iter().map(|it| &it.id)
    }

    /// 1-based rank of `id`, if present.
    pub fn rank_of(&self, id: &ImageId) -> Option<usize> {
        self.items.iter().position(|it| &it.id == id).map(|p| p + 1)
    }
}

/// The `k` best gallery rows for a query, best first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopK {
    pub k: usize,
    pub indices: Vec<usize>,
}

impl TopK {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn rank(g: &Gallery, query: &EmbeddingVector, source: RankingSource) -> Result<Ranking> {
    if query.dim() != g.dim() {
        return Err(Error::DimensionMismatch {
            expected: g.dim(),
            actual: query.dim(),
        });
    }
    let q = query.as_slice();
    let mut scored: Vec<(usize, f64)> = g
        .entries()
        .iter()
        .enumerate()
        .map(|(i, e)| (i, dot(q, e.embedding.as_slice())))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let items = scored
        .into_iter()
        .map(|(index, score)| RankedItem {
            id: g.entry(index).id.clone(),
            index,
            score,
        })
        .collect();
    Ok(Ranking { items, source })
}

pub fn rank_by_text(g: &Gallery, query: &EmbeddingVector) -> Result<Ranking> {
    rank(g, query, RankingSource::Dialog)
}

pub fn rank_by_image(g: &Gallery, image_embedding: &EmbeddingVector) -> Result<Ranking> {
    rank(g, image_embedding, RankingSource::Image)
}

/// First `min(n, |r|)` gallery indices of the ranking. `n = 0` is treated as 1.
pub fn top_n(r: &Ranking, n: usize) -> TopK {
    let n = n.max(1);
    TopK {
        k: n,
        indices: r.items.iter().take(n).map(|it| it.index).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gallery::GalleryEntry;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gallery(rows: &[Vec<f32>]) -> Gallery {
        Gallery::from_entries(
            rows.iter()
                .enumerate()
                .map(|(i, r)| GalleryEntry {
                    id: ImageId::new(format!("img_{i}")),
                    caption: format!("c{i}"),
                    embedding: EmbeddingVector::normalized(r, "t").unwrap(),
                })
                .collect(),
        )
        .unwrap()
    }

    fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f32>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .collect()
    }

    #[test]
    fn self_similarity_ranks_first() {
        let mut rows = vec![vec![0.0, 1.0, 0.0, 0.0]; 6];
        rows[3] = vec![1.0, 0.0, 0.0, 0.0];
        let g = gallery(&rows);
        let r = rank_by_text(&g, &g.entry(3).embedding).unwrap();
        assert_eq!(r.items[0].index, 3);
        assert!((r.items[0].score - 1.0).abs() < 1e-12);
        assert_eq!(r.source, RankingSource::Dialog);
    }

    #[test]
    fn identical_entries_keep_ingestion_order() {
        let g = gallery(&vec![vec![1.0, 1.0]; 5]);
        let r = rank_by_text(&g, &g.entry(0).embedding).unwrap();
        let order: Vec<usize> = r.items.iter().map(|it| it.index).collect();
        assert_eq!(order, vec![0, 1, 2, 3, 4]);
        assert!(r.items.windows(2).all(|w| w[0].score == w[1].score));
    }

    #[test]
    fn orthogonal_image_query_scores_zero() {
        let g = gallery(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![1.0, 1.0, 0.0]]);
        let q = EmbeddingVector::normalized(&[0.0, 0.0, 1.0], "q").unwrap();
        let r = rank_by_image(&g, &q).unwrap();
        assert_eq!(r.source, RankingSource::Image);
        assert!(r.items.iter().all(|it| it.score == 0.0));
        assert_eq!(r.items.iter().map(|it| it.index).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let g = gallery(&[vec![1.0, 0.0]]);
        let q = EmbeddingVector::normalized(&[1.0, 0.0, 0.0], "q").unwrap();
        assert!(matches!(
            rank_by_text(&g, &q),
            Err(Error::DimensionMismatch { expected: 2, actual: 3 })
        ));
    }

    /// Brute force: score every row with a scalar loop, then pick maxima one at a time.
    fn brute_force_order(rows: &[Vec<f32>], q: &[f32]) -> Vec<usize> {
        let normed: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let n = r.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
                r.iter().map(|&x| ((x as f64 / n) as f32) as f64).collect()
            })
            .collect();
        let mut scores = Vec::new();
        for r in &normed {
            let mut s = 0.0;
            for j in 0..q.len() {
                s += r[j] * q[j] as f64;
            }
            scores.push(s);
        }
        let mut taken = vec![false; rows.len()];
        let mut order = Vec::new();
        for _ in 0..rows.len() {
            let mut best: Option<usize> = None;
            for i in 0..rows.len() {
                if taken[i] {
                    continue;
                }
                if best.is_none() || scores[i] > scores[best.unwrap()] {
                    best = Some(i);
                }
            }
            taken[best.unwrap()] = true;
            order.push(best.unwrap());
        }
        order
    }

    #[test]
    fn random_instance_matches_brute_force_and_top5() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let rows = random_rows(&mut rng, 20, 8);
        let g = gallery(&rows);
        let raw_q: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let q = EmbeddingVector::normalized(&raw_q, "q").unwrap();
        let expected = brute_force_order(&rows, q.as_slice());

        let r = rank_by_text(&g, &q).unwrap();
        let got: Vec<usize> = r.items.iter().map(|it| it.index).collect();
        assert_eq!(got, expected);

        let r_img = rank_by_image(&g, &q).unwrap();
        assert_eq!(r_img.items.iter().map(|it| it.index).collect::<Vec<_>>(), expected);

        assert_eq!(top_n(&r, 5).indices, expected[..5].to_vec());
        assert_eq!(top_n(&r, 1).indices, vec![expected[0]]);
        assert_eq!(top_n(&r, 20).indices, expected);
        assert_eq!(top_n(&r, 50).indices.len(), 20);
    }

    proptest! {
        #[test]
        fn ranking_is_a_sorted_permutation(seed in any::<u64>(), n in 1usize..40, d in 1usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<Vec<f32>> = random_rows(&mut rng, n, d)
                .into_iter()
                .map(|mut r| { r[0] += 2.0; r })
                .collect();
            let g = gallery(&rows);
            let raw_q: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            prop_assume!(raw_q.iter().any(|x| x.abs() > 1e-3));
            let q = EmbeddingVector::normalized(&raw_q, "q").unwrap();
            let r = rank_by_text(&g, &q).unwrap();

            let mut seen: Vec<usize> = r.items.iter().map(|it| it.index).collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
            for w in r.items.windows(2) {
                prop_assert!(w[0].score >= w[1].score);
                if w[0].score == w[1].score {
                    prop_assert!(w[0].index < w[1].index);
                }
            }
            for it in &r.items {
                let mut s = 0.0f64;
                for (a, b) in q.as_slice().iter().zip(g.entry(it.index).embedding.as_slice()) {
                    s += *a as f64 * *b as f64;
                }
                prop_assert!((it.score - s).abs() <= 1e-6);
            }
        }
    }
}
