//! Candidate fusion and Recall@10 / Hits@10 scoring.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gallery::ImageId;
use crate::vecsearch::Ranking;

/// Size of the final candidate set shown per round.
pub const CANDIDATE_COUNT: usize = 10;

/// How many candidates each module contributes; the counts sum to [`CANDIDATE_COUNT`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "(usize, usize)", into = "(usize, usize)")]
pub struct FusionPolicy {
    dial_num: usize,
    image_num: usize,
}

impl FusionPolicy {
    pub fn new(dial_num: usize, image_num: usize) -> Result<Self> {
        if dial_num + image_num != CANDIDATE_COUNT {
            return Err(Error::PolicyInvalid {
                dial_num,
                image_num,
            });
        }
        Ok(FusionPolicy {
            dial_num,
            image_num,
        })
    }

    pub fn dial_num(&self) -> usize {
        self.dial_num
    }

    pub fn image_num(&self) -> usize {
        self.image_num
    }

    /// Dialog-only results.
    pub fn dialog_only() -> Self {
        FusionPolicy {
            dial_num: CANDIDATE_COUNT,
            image_num: 0,
        }
    }

    /// `(10,0), (9,1), …, (0,10)`.
    pub fn sweep() -> Vec<FusionPolicy> {
        (0..=CANDIDATE_COUNT)
            .rev()
            .map(|d| FusionPolicy {
                dial_num: d,
                image_num: CANDIDATE_COUNT - d,
            })
            .collect()
    }
}

impl Default for FusionPolicy {
    fn default() -> Self {
        FusionPolicy {
            dial_num: 7,
            image_num: 3,
        }
    }
}

impl TryFrom<(usize, usize)> for FusionPolicy {
    type Error = Error;

    fn try_from((d, i): (usize, usize)) -> Result<Self> {
        FusionPolicy::new(d, i)
    }
}

impl From<FusionPolicy> for (usize, usize) {
    fn from(p: FusionPolicy) -> Self {
        (p.dial_num, p.image_num)
    }
}

impl fmt::Display for FusionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.dial_num, self.image_num)
    }
}

impl FromStr for FusionPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("policy must look like `7,3`, got {s:?}"));
        let (d, i) = s.split_once(',').ok_or_else(bad)?;
        let d = d.trim().parse().map_err(|_| bad())?;
        let i = i.trim().parse().map_err(|_| bad())?;
        FusionPolicy::new(d, i)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Dialog,
    Image,
    Backfill,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub ids: Vec<ImageId>,
    pub provenance: Vec<Provenance>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: &ImageId) -> bool {
        self.ids.contains(id)
    }

    fn push(&mut self, id: &ImageId, tag: Provenance) -> bool {
        if self.contains(id) {
            return false;
        }
        self.ids.push(id.clone());
        self.provenance.push(tag);
        true
    }
}

/// Dialog block first (its top `dial_num`), then the best image-ranked ids
/// not already chosen until `image_num` more are added, then dialog
/// continuation if the image ranking runs out.
pub fn fuse(dialog: &Ranking, image: &Ranking, policy: FusionPolicy) -> Result<CandidateSet> {
    if dialog.len() != image.len() {
        return Err(Error::InvalidParams(format!(
            "rankings cover different galleries ({} vs {} images)",
            dialog.len(),
            image.len()
        )));
    }
    let want = CANDIDATE_COUNT.min(dialog.len());
    let mut out = CandidateSet {
        ids: Vec::with_capacity(want),
        provenance: Vec::with_capacity(want),
    };
    for item in dialog.items.iter().take(policy.dial_num) {
        out.push(&item.id, Provenance::Dialog);
    }
    let mut added = 0;
    for item in &image.items {
        if added == policy.image_num || out.len() == want {
            break;
        }
        if out.push(&item.id, Provenance::Image) {
            added += 1;
        }
    }
    for item in dialog.items.iter().skip(policy.dial_num) {
        if out.len() == want {
            break;
        }
        out.push(&item.id, Provenance::Backfill);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnMetrics {
    pub round: usize,
    pub recall_at_10: bool,
    pub hits_at_10: bool,
    /// 1-based rank of the target in each module's full ranking.
    pub target_rank_dialog: usize,
    pub target_rank_image: usize,
}

pub fn score_turn(
    round: usize,
    candidates: &CandidateSet,
    target: &ImageId,
    dialog: &Ranking,
    image: &Ranking,
    prior: &[TurnMetrics],
) -> Result<TurnMetrics> {
    let unknown = || Error::UnknownTarget(target.to_string());
    let target_rank_dialog = dialog.rank_of(target).ok_or_else(unknown)?;
    let target_rank_image = image.rank_of(target).ok_or_else(unknown)?;
    let recall_at_10 = candidates.contains(target);
    Ok(TurnMetrics {
        round,
        recall_at_10,
        hits_at_10: recall_at_10 || prior.iter().any(|m| m.hits_at_10),
        target_rank_dialog,
        target_rank_image,
    })
}

/// Running OR of per-round recall flags.
pub fn hits_from_recall(recall: &[bool]) -> Vec<bool> {
    recall
        .iter()
        .scan(false, |hit, &r| {
            *hit |= r;
            Some(*hit)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMeans {
    pub round: usize,
    pub mean_recall10: f64,
    pub mean_hits10: f64,
}

/// Per-round means over sessions. A session that stopped early carries its
/// final round's flags forward. Sessions with no rounds are ignored.
pub fn aggregate(sessions: &[Vec<TurnMetrics>], rounds: usize) -> Vec<RoundMeans> {
    let live: Vec<&Vec<TurnMetrics>> = sessions.iter().filter(|s| !s.is_empty()).collect();
    (1..=rounds)
        .map(|round| {
            let (mut recall, mut hits) = (0usize, 0usize);
            for s in &live {
                let m = s.get(round - 1).unwrap_or_else(|| s.last().unwrap());
                recall += usize::from(m.recall_at_10);
                hits += usize::from(m.hits_at_10);
            }
            let n = live.len().max(1) as f64;
            RoundMeans {
                round,
                mean_recall10: recall as f64 / n,
                mean_hits10: hits as f64 / n,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vecsearch::{RankedItem, RankingSource};
    use proptest::prelude::*;

    fn ranking(ids: &[usize], source: RankingSource) -> Ranking {
        Ranking {
            items: ids
                .iter()
                .enumerate()
                .map(|(pos, &i)| RankedItem {
                    id: ImageId::new(format!("i{i}")),
                    index: i,
                    score: 1.0 - pos as f64 * 0.01,
                })
                .collect(),
            source,
        }
    }

    fn ids(c: &CandidateSet) -> Vec<String> {
        c.ids.iter().map(|i| i.to_string()).collect()
    }

    #[test]
    fn default_policy_is_seven_three() {
        let p = FusionPolicy::default();
        assert_eq!((p.dial_num(), p.image_num()), (7, 3));
        assert_eq!("7,3".parse::<FusionPolicy>().unwrap(), p);
        assert!(matches!(FusionPolicy::new(6, 3), Err(Error::PolicyInvalid { .. })));
    }

    #[test]
    fn image_block_skips_dialog_duplicates() {
        let order: Vec<usize> = (1..=13).collect();
        let dialog = ranking(&order, RankingSource::Dialog);
        let mut img_order = vec![1, 11, 12, 13];
        img_order.extend(2..=10);
        let image = ranking(&img_order, RankingSource::Image);
        let c = fuse(&dialog, &image, FusionPolicy::default()).unwrap();
        assert_eq!(
            ids(&c),
            ["i1", "i2", "i3", "i4", "i5", "i6", "i7", "i11", "i12", "i13"]
        );
        assert_eq!(c.provenance[7..], [Provenance::Image; 3]);
    }

    #[test]
    fn boundary_policies_reproduce_module_top10() {
        let dialog = ranking(&(0..20).collect::<Vec<_>>(), RankingSource::Dialog);
        let image = ranking(&(0..20).rev().collect::<Vec<_>>(), RankingSource::Image);
        let d = fuse(&dialog, &image, FusionPolicy::new(10, 0).unwrap()).unwrap();
        assert_eq!(d.ids, dialog.ids().take(10).cloned().collect::<Vec<_>>());
        let i = fuse(&dialog, &image, FusionPolicy::new(0, 10).unwrap()).unwrap();
        assert_eq!(i.ids, image.ids().take(10).cloned().collect::<Vec<_>>());
    }

    #[test]
    fn small_gallery_is_backfilled_without_duplicates() {
        let dialog = ranking(&[0, 1, 2, 3], RankingSource::Dialog);
        let image = ranking(&[0, 1, 2, 3], RankingSource::Image);
        let c = fuse(&dialog, &image, FusionPolicy::new(2, 8).unwrap()).unwrap();
        assert_eq!(ids(&c), ["i0", "i1", "i2", "i3"]);
        assert_eq!(
            c.provenance,
            [Provenance::Dialog, Provenance::Dialog, Provenance::Image, Provenance::Image]
        );
    }

    #[test]
    fn running_or_of_recall() {
        assert_eq!(hits_from_recall(&[false, true, false]), vec![false, true, true]);
        assert_eq!(hits_from_recall(&[false; 10]), vec![false; 10]);
    }

    #[test]
    fn score_turn_carries_prior_hits_and_rejects_unknown_target() {
        let dialog = ranking(&(0..12).collect::<Vec<_>>(), RankingSource::Dialog);
        let image = ranking(&(0..12).rev().collect::<Vec<_>>(), RankingSource::Image);
        let c = fuse(&dialog, &image, FusionPolicy::dialog_only()).unwrap();
        let hit = score_turn(1, &c, &ImageId::new("i3"), &dialog, &image, &[]).unwrap();
        assert!(hit.recall_at_10 && hit.hits_at_10);
        assert_eq!((hit.target_rank_dialog, hit.target_rank_image), (4, 9));
        let miss = score_turn(2, &c, &ImageId::new("i11"), &dialog, &image, &[hit]).unwrap();
        assert!(!miss.recall_at_10 && miss.hits_at_10);
        assert!(matches!(
            score_turn(1, &c, &ImageId::new("zz"), &dialog, &image, &[]),
            Err(Error::UnknownTarget(_))
        ));
    }

    fn metrics(flags: &[bool]) -> Vec<TurnMetrics> {
        hits_from_recall(flags)
            .into_iter()
            .zip(flags)
            .enumerate()
            .map(|(i, (h, &r))| TurnMetrics {
                round: i + 1,
                recall_at_10: r,
                hits_at_10: h,
                target_rank_dialog: 1,
                target_rank_image: 1,
            })
            .collect()
    }

    #[test]
    fn aggregate_means() {
        let a = metrics(&[false, true]);
        let b = metrics(&[true, true]);
        let m = aggregate(&[a.clone(), b], 2);
        assert_eq!(m[0].mean_hits10, 0.5);
        assert_eq!(m[1].mean_hits10, 1.0);
        let single = aggregate(&[a], 2);
        assert_eq!(single[0].mean_recall10, 0.0);
        assert_eq!(single[1].mean_recall10, 1.0);
        // stopped after a hit in round 1: carried forward
        let early = aggregate(&[metrics(&[true])], 3);
        assert!(early.iter().all(|r| r.mean_hits10 == 1.0));
    }

    proptest! {
        #[test]
        fn fusion_output_is_distinct_and_sized(
            n in 1usize..30,
            d in 0usize..=10,
            seed_a in any::<u64>(),
            seed_b in any::<u64>(),
        ) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut a: Vec<usize> = (0..n).collect();
            let mut b = a.clone();
            a.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed_a));
            b.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed_b));
            let dialog = ranking(&a, RankingSource::Dialog);
            let image = ranking(&b, RankingSource::Image);
            let policy = FusionPolicy::new(d, 10 - d).unwrap();
            let c = fuse(&dialog, &image, policy).unwrap();
            prop_assert_eq!(c.len(), n.min(10));
            let mut sorted = c.ids.clone();
            sorted.sort();
            sorted.dedup();
            prop_assert_eq!(sorted.len(), c.len());
            let dialog_block = c.provenance.iter().filter(|p| **p == Provenance::Dialog).count();
            prop_assert_eq!(dialog_block, d.min(n));
            prop_assert_eq!(&c.ids[..d.min(n)], &dialog.items[..d.min(n)].iter().map(|i| i.id.clone()).collect::<Vec<_>>()[..]);
        }
    }
}
