use crate::vecsearch::Ranking;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over the ranked id sequence, ids separated by a `0xff` byte.
pub fn ranking_digest(r: &Ranking) -> String {
    let mut h = FNV_OFFSET;
    for id in r.ids() {
        for &b in id.as_str().as_bytes().iter().chain(std::iter::once(&0xffu8)) {
            h ^= u64::from(b);
            h = h.wrapping_mul(FNV_PRIME);
        }
    }
    format!("{h:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gallery::ImageId;
    use crate::vecsearch::{RankedItem, RankingSource};

    fn ranking(ids: &[&str]) -> Ranking {
        Ranking {
            items: ids
                .iter()
                .enumerate()
                .map(|(i, id)| RankedItem {
                    id: ImageId::new(*id),
                    index: i,
                    score: 0.0,
                })
                .collect(),
            source: RankingSource::Dialog,
        }
    }

    #[test]
    fn known_values_and_order_sensitivity() {
        // FNV-1a of the empty input is the offset basis
        assert_eq!(ranking_digest(&ranking(&[])), "cbf29ce484222325");
        // single byte 'a' then separator, computed by hand from the FNV-1a recurrence
        let mut h = FNV_OFFSET;
        for b in [b'a', 0xff] {
            h = (h ^ b as u64).wrapping_mul(FNV_PRIME);
        }
        assert_eq!(ranking_digest(&ranking(&["a"])), format!("{h:016x}"));
        assert_ne!(
            ranking_digest(&ranking(&["a", "b"])),
            ranking_digest(&ranking(&["b", "a"]))
        );
        assert_ne!(
            ranking_digest(&ranking(&["ab"])),
            ranking_digest(&ranking(&["a", "b"]))
        );
    }
}
