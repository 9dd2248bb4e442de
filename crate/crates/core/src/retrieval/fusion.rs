use std::collections::BTreeMap;

use super::{top_k, RankedEntry, RankedList};
use crate::scalar::Scalar;

/// Reciprocal rank fusion: `score(d) = Σ 1 / (c + rank_d)` with 1-based ranks,
/// summed over the lists that contain `d`.
///
/// Each snippet's contributions are added in ascending rank order, so the
/// result does not depend on the order of `lists`.
pub fn fuse_rrf<S: Scalar>(lists: &[RankedList<S>], c: u32, k: usize) -> RankedList<S> {
    let mut ranks: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for list in lists {
        for (i, entry) in list.entries.iter().enumerate() {
            ranks.entry(entry.snippet_id.as_str()).or_default().push(i + 1);
        }
    }
    let c = S::from_f64_lossy(c as f64);
    let entries = ranks
        .into_iter()
        .map(|(id, mut rs)| {
            rs.sort_unstable();
            let score = rs
                .into_iter()
                .fold(S::zero(), |acc, r| acc + S::one() / (c + S::from_usize_lossy(r)));
            RankedEntry {
                snippet_id: id.to_string(),
                score,
            }
        })
        .collect();

    let mut retrievers: Vec<&str> = lists.iter().map(|l| l.retriever_id.as_str()).collect();
    retrievers.sort_unstable();
    RankedList {
        query_key: lists.first().map(|l| l.query_key.clone()).unwrap_or_default(),
        retriever_id: format!("rrf({})", retrievers.join("+")),
        entries: top_k(entries, k),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn list(ids: &[&str]) -> RankedList<f64> {
        RankedList {
            query_key: "q".into(),
            retriever_id: "r".into(),
            entries: ids
                .iter()
                .enumerate()
                .map(|(i, id)| RankedEntry {
                    snippet_id: id.to_string(),
                    score: (ids.len() - i) as f64,
                })
                .collect(),
        }
    }

    #[test]
    fn single_list_keeps_order() {
        let fused = fuse_rrf(&[list(&["z", "a", "m"])], 60, 10);
        assert_eq!(fused.ids().collect::<Vec<_>>(), vec!["z", "a", "m"]);
    }

    #[test]
    fn worked_example() {
        let fused = fuse_rrf(&[list(&["A", "B", "C"]), list(&["C", "A", "B"])], 60, 10);
        assert_eq!(fused.ids().collect::<Vec<_>>(), vec!["A", "C", "B"]);
        assert_eq!(fused.entries[0].score, 1.0 / 61.0 + 1.0 / 62.0);
    }

    #[test]
    fn twice_at_rank_two_beats_once_at_rank_one() {
        let fused = fuse_rrf(&[list(&["X", "D"]), list(&["Y", "D"])], 60, 10);
        assert_eq!(fused.entries[0].snippet_id, "D");
        assert_eq!(fused.entries[0].score, 2.0 / 62.0);
    }

    #[test]
    fn truncates_to_k() {
        let fused = fuse_rrf(&[list(&["a", "b", "c"]), list(&["d"])], 60, 2);
        assert_eq!(fused.len(), 2);
        assert!(fused.check_invariants(2).is_ok());
    }
}
