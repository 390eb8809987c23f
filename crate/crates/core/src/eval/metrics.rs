//! Ranking metrics: average precision and top-N hits.

use std::collections::HashSet;
use std::hash::Hash;

use crate::error::{Error, Result};

/// Mean over relevant items of precision at the item's rank. Relevant items
/// that never appear in `ranking` contribute zero.
pub fn average_precision<T: Eq + Hash>(ranking: &[T], relevant: &HashSet<T>) -> Result<f64> {
    if relevant.is_empty() {
        return Err(Error::InvalidArgument("relevance set is empty".into()));
    }
    let mut seen = HashSet::with_capacity(ranking.len());
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, item) in ranking.iter().enumerate() {
        if !seen.insert(item) {
            return Err(Error::InvalidArgument(format!(
                "ranking repeats an item at rank {}",
                i + 1
            )));
        }
        if relevant.contains(item) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / relevant.len() as f64)
}

/// Mean AP over queries, plus the per-query values.
pub fn mean_average_precision<T: Eq + Hash>(
    rankings: &[Vec<T>],
    relevance: &[HashSet<T>],
) -> Result<(f64, Vec<f64>)> {
    if rankings.len() != relevance.len() {
        return Err(Error::InvalidArgument(format!(
            "{} rankings for {} relevance sets",
            rankings.len(),
            relevance.len()
        )));
    }
    if rankings.is_empty() {
        return Err(Error::InvalidArgument("no queries to evaluate".into()));
    }
    let aps = rankings
        .iter()
        .zip(relevance)
        .map(|(r, rel)| average_precision(r, rel))
        .collect::<Result<Vec<f64>>>()?;
    Ok((aps.iter().sum::<f64>() / aps.len() as f64, aps))
}

/// Whether any relevant item is among the first `n`.
pub fn hit_at<T: Eq + Hash>(ranking: &[T], relevant: &HashSet<T>, n: usize) -> bool {
    ranking.iter().take(n).any(|r| relevant.contains(r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(items: &[u32]) -> HashSet<u32> {
        items.iter().copied().collect()
    }

    /// Precision@k evaluated literally at each k holding a relevant item.
    fn brute_force_ap(ranking: &[u32], relevant: &HashSet<u32>) -> f64 {
        let mut total = 0.0;
        for k in 1..=ranking.len() {
            if relevant.contains(&ranking[k - 1]) {
                let in_top = ranking[..k].iter().filter(|r| relevant.contains(r)).count();
                total += in_top as f64 / k as f64;
            }
        }
        total / relevant.len() as f64
    }

    #[test]
    fn single_relevant_at_top() {
        assert_eq!(average_precision(&[7, 1, 2], &set(&[7])).unwrap(), 1.0);
    }

    #[test]
    fn relevant_at_ranks_one_and_three() {
        let ap = average_precision(&[1, 2, 3, 4], &set(&[1, 3])).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert!((ap - 0.833_333_333_3).abs() < 1e-9);
    }

    #[test]
    fn unretrieved_items_count_as_zero() {
        assert_eq!(average_precision(&[1, 2], &set(&[1, 9])).unwrap(), 0.5);
        assert_eq!(average_precision::<u32>(&[], &set(&[1])).unwrap(), 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(average_precision(&[1, 2], &set(&[])).is_err());
        assert!(average_precision(&[1, 1], &set(&[1])).is_err());
        assert!(mean_average_precision(&[vec![1u32]], &[]).is_err());
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            perm in Just((0u32..30).collect::<Vec<_>>()).prop_shuffle(),
            len in 0usize..30,
            rel in proptest::collection::hash_set(0u32..40, 1..8),
        ) {
            let ranking = &perm[..len];
            prop_assert_eq!(average_precision(ranking, &rel).unwrap(), brute_force_ap(ranking, &rel));
        }

        #[test]
        fn query_order_does_not_matter(
            rankings in proptest::collection::vec(Just((0u32..10).collect::<Vec<_>>()).prop_shuffle(), 1..6),
            rot in 0usize..6,
        ) {
            let relevance: Vec<HashSet<u32>> = (0..rankings.len()).map(|i| set(&[i as u32, 9])).collect();
            let (a, _) = mean_average_precision(&rankings, &relevance).unwrap();
            let k = rot % rankings.len();
            let mut r2 = rankings.clone();
            let mut s2 = relevance.clone();
            r2.rotate_left(k);
            s2.rotate_left(k);
            let (b, _) = mean_average_precision(&r2, &s2).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn trailing_irrelevant_items_are_harmless(
            perm in Just((0u32..20).collect::<Vec<_>>()).prop_shuffle(),
            extra in 1usize..10,
        ) {
            let rel = set(&[perm[0], perm[3], perm[7]]);
            let head = &perm[..8];
            let tail: Vec<u32> = head.iter().copied().chain(100..100 + extra as u32).collect();
            prop_assert_eq!(average_precision(head, &rel).unwrap(), average_precision(&tail, &rel).unwrap());
        }
    }
}
