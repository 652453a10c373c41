//! Seeded Lloyd's k-means with k-means++ initialization.
//!
//! Initial centroids are drawn from the distinct points (first occurrence
//! order): the first uniformly, each further one with probability
//! proportional to its squared distance to the nearest chosen centroid.
//! Lloyd iterations then alternate assignment (nearest centroid, lowest
//! index on ties) and mean update (empty clusters keep their centroid) until
//! the largest centroid shift drops below `tol` or `max_iter` is reached; a
//! final assignment against the last centroids produces the labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// Number of clusters actually used: `min(k, distinct points)`.
    pub k: usize,
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub iterations: usize,
}

impl KMeansResult {
    /// Sum of squared distances from each point to its centroid.
    pub fn sse(&self, points: &[Vec<f64>]) -> f64 {
        points
            .iter()
            .zip(&self.labels)
            .map(|(p, &l)| sq_dist(p, &self.centroids[l]))
            .sum()
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn distinct_points(points: &[Vec<f64>]) -> Vec<&Vec<f64>> {
    let mut out: Vec<&Vec<f64>> = Vec::new();
    for p in points {
        if !out.contains(&p) {
            out.push(p);
        }
    }
    out
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(p, centroid);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

fn plus_plus(distinct: &[&Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![distinct[rng.random_range(0..distinct.len())].clone()];
    let mut weights = vec![0.0f64; distinct.len()];
    while centroids.len() < k {
        for (w, p) in weights.iter_mut().zip(distinct) {
            *w = centroids
                .iter()
                .map(|c| sq_dist(p, c))
                .fold(f64::INFINITY, f64::min);
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            break;
        }
        let u = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &w) in weights.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            acc += w;
            pick = Some(i);
            if acc > u {
                break;
            }
        }
        centroids.push(distinct[pick.expect("positive total has a positive weight")].clone());
    }
    centroids
}

/// Clusters `points` (all of equal dimension, at least one) into at most `k` groups.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize, tol: f64) -> KMeansResult {
    assert!(!points.is_empty(), "k-means needs at least one point");
    let distinct = distinct_points(points);
    let k = k.max(1).min(distinct.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus(&distinct, k, &mut rng);
    let dim = points[0].len();

    let mut labels = vec![0usize; points.len()];
    let mut iterations = 0;
    for _ in 0..max_iter.max(1) {
        iterations += 1;
        for (l, p) in labels.iter_mut().zip(points) {
            *l = nearest(p, &centroids);
        }
        let mut sums = vec![vec![0.0f64; dim]; centroids.len()];
        let mut counts = vec![0usize; centroids.len()];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(p) {
                *s += x;
            }
        }
        let mut shift = 0.0f64;
        for (c, centroid) in centroids.iter_mut().enumerate() {
            if counts[c] == 0 {
                continue;
            }
            let updated: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(sq_dist(centroid, &updated).sqrt());
            *centroid = updated;
        }
        if shift < tol {
            break;
        }
    }
    for (l, p) in labels.iter_mut().zip(points) {
        *l = nearest(p, &centroids);
    }
    KMeansResult {
        k,
        labels,
        centroids,
        iterations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_points_reduce_k() {
        let pts = vec![vec![1.0, 2.0], vec![1.0, 2.0]];
        let r = kmeans(&pts, 2, 0, 50, 1e-9);
        assert_eq!(r.k, 1);
        assert_eq!(r.labels, vec![0, 0]);
    }

    #[test]
    fn k_equal_n_gives_zero_sse() {
        let pts: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let r = kmeans(&pts, 6, 11, 100, 1e-12);
        assert_eq!(r.k, 6);
        assert_eq!(r.sse(&pts), 0.0);
        let mut l = r.labels.clone();
        l.sort_unstable();
        l.dedup();
        assert_eq!(l.len(), 6);
    }

    /// Two tight groups far apart: the label partition must be the grouping,
    /// and its SSE must be the minimum over every 2-partition (checked by enumeration).
    #[test]
    fn separated_groups_are_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pts = Vec::new();
        for g in 0..2 {
            for _ in 0..5 {
                let base = if g == 0 { -10.0 } else { 10.0 };
                pts.push(vec![base + rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)]);
            }
        }
        for seed in 0..20 {
            let r = kmeans(&pts, 2, seed, 100, 1e-12);
            let first = r.labels[0];
            assert!(r.labels[..5].iter().all(|&l| l == first));
            assert!(r.labels[5..].iter().all(|&l| l != first));

            let mut best = f64::INFINITY;
            for mask in 1u32..(1 << 10) - 1 {
                let mut sse = 0.0;
                for side in [0, 1] {
                    let members: Vec<&Vec<f64>> = (0..10)
                        .filter(|i| (mask >> i) & 1 == side)
                        .map(|i| &pts[i])
                        .collect();
                    let mean: Vec<f64> = (0..2)
                        .map(|d| members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64)
                        .collect();
                    sse += members.iter().map(|p| sq_dist(p, &mean)).sum::<f64>();
                }
                best = best.min(sse);
            }
            assert!((r.sse(&pts) - best).abs() < 1e-9);
        }
    }

    #[test]
    fn seeded_runs_are_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        assert_eq!(kmeans(&pts, 5, 3, 100, 1e-9), kmeans(&pts, 5, 3, 100, 1e-9));
    }
}
