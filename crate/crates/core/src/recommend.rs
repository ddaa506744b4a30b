//! Constrained next-best-action selection: score every candidate with
//! the learned action-value and keep the top k, never recommending
//! outside the candidate set.

use serde::{Deserialize, Serialize};

use crate::domain::ClientTuple;
use crate::error::{CrnError, Result};
use crate::model::RewardModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub client_id: u64,
    pub step: usize,
    /// (action id, predicted reward), rewards non-increasing, ties broken
    /// by smaller action id.
    pub ranked: Vec<(usize, f64)>,
}

/// Pure selection over already-scored candidates; duplicated ids are
/// collapsed first. Kept separate from the model so the ranking rule is
/// testable on its own.
pub fn rank_scored(scored: &[(usize, f64)], k: usize) -> Result<Vec<(usize, f64)>> {
    if scored.is_empty() {
        return Err(CrnError::Constraint("candidate set is empty".into()));
    }
    if k < 1 {
        return Err(CrnError::Range("k must be >= 1".into()));
    }
    let mut unique: Vec<(usize, f64)> = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (action, score) in scored {
        if seen.insert(*action) {
            unique.push((*action, *score));
        }
    }
    unique.sort_by(|a, b| {
        b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0))
    });
    unique.truncate(k);
    Ok(unique)
}

/// Scores every candidate with the model and returns the top k. The
/// candidate set arrives per query; nothing is cached across calls, so
/// dynamically changing constraint sets are safe.
pub fn recommend_top_k<M: RewardModel>(
    model: &M,
    tuple: &ClientTuple,
    candidates: &[usize],
    k: usize,
) -> Result<Recommendation> {
    if candidates.is_empty() {
        return Err(CrnError::Constraint(format!(
            "client {} step {}: empty candidate set",
            tuple.client_id, tuple.step
        )));
    }
    let mut scored = Vec::with_capacity(candidates.len());
    let mut seen = std::collections::BTreeSet::new();
    for &action in candidates {
        if seen.insert(action) {
            scored.push((action, model.predict(tuple, action)?));
        }
    }
    let ranked = rank_scored(&scored, k)?;
    Ok(Recommendation { client_id: tuple.client_id, step: tuple.step, ranked })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SplitMix64;

    #[test]
    fn single_candidate_is_forced() {
        let ranked = rank_scored(&[(3, 0.01)], 5).unwrap();
        assert_eq!(ranked, vec![(3, 0.01)]);
    }

    #[test]
    fn k_larger_than_candidates_returns_all_ranked() {
        let ranked = rank_scored(&[(1, 0.2), (2, 0.9), (3, 0.5)], 10).unwrap();
        assert_eq!(ranked.len(), 3);
        assert_eq!(ranked[0].0, 2);
        assert_eq!(ranked[1].0, 3);
        assert_eq!(ranked[2].0, 1);
    }

    #[test]
    fn ties_break_by_smaller_action_id() {
        let ranked = rank_scored(&[(7, 0.4), (2, 0.4), (5, 0.4)], 2).unwrap();
        assert_eq!(ranked, vec![(2, 0.4), (5, 0.4)]);
    }

    #[test]
    fn empty_candidates_and_bad_k_are_errors() {
        assert!(rank_scored(&[], 1).is_err());
        assert!(rank_scored(&[(1, 0.5)], 0).is_err());
    }

    /// Brute-force oracle: enumerate every candidate, sort by
    /// (score desc, id asc), take k.
    fn brute_force(scored: &[(usize, f64)], k: usize) -> Vec<(usize, f64)> {
        let mut uniq: Vec<(usize, f64)> = Vec::new();
        for (a, s) in scored {
            if !uniq.iter().any(|(b, _)| b == a) {
                uniq.push((*a, *s));
            }
        }
        let mut best: Vec<(usize, f64)> = Vec::new();
        while best.len() < k && best.len() < uniq.len() {
            let mut pick: Option<(usize, f64)> = None;
            for (a, s) in &uniq {
                if best.iter().any(|(b, _)| b == a) {
                    continue;
                }
                pick = match pick {
                    None => Some((*a, *s)),
                    Some((pa, ps)) => {
                        if *s > ps || (*s == ps && *a < pa) {
                            Some((*a, *s))
                        } else {
                            Some((pa, ps))
                        }
                    }
                };
            }
            best.push(pick.unwrap());
        }
        best
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        let mut rng = SplitMix64::new(404);
        for _ in 0..500 {
            let n = 1 + rng.below(10);
            // Coarse scores force plenty of ties.
            let scored: Vec<(usize, f64)> = (0..n)
                .map(|_| (1 + rng.below(12), (rng.below(5) as f64) / 5.0))
                .collect();
            let k = 1 + rng.below(4);
            let got = rank_scored(&scored, k).unwrap();
            let want = brute_force(&scored, k);
            assert_eq!(got, want, "scored {scored:?} k {k}");
        }
    }

    #[test]
    fn order_invariant_under_monotone_transform() {
        let mut rng = SplitMix64::new(17);
        for _ in 0..200 {
            let n = 2 + rng.below(8);
            let scored: Vec<(usize, f64)> = (1..=n).map(|a| (a, rng.next_f64())).collect();
            let transformed: Vec<(usize, f64)> =
                scored.iter().map(|(a, s)| (*a, (3.0 * s + 1.0).exp())).collect();
            let base: Vec<usize> =
                rank_scored(&scored, n).unwrap().into_iter().map(|(a, _)| a).collect();
            let trans: Vec<usize> =
                rank_scored(&transformed, n).unwrap().into_iter().map(|(a, _)| a).collect();
            assert_eq!(base, trans);
        }
    }

    #[test]
    fn shrinking_candidates_never_promotes_an_excluded_ranking() {
        // If an action appears in the top-k of the full set and survives
        // the shrink, it must still appear in the top-k of the subset.
        let mut rng = SplitMix64::new(23);
        for _ in 0..200 {
            let scored: Vec<(usize, f64)> =
                (1..=8).map(|a| (a, (rng.below(6) as f64) / 6.0)).collect();
            let k = 3;
            let full: Vec<usize> =
                rank_scored(&scored, k).unwrap().into_iter().map(|(a, _)| a).collect();
            let subset: Vec<(usize, f64)> =
                scored.iter().filter(|(a, _)| a % 2 == 1).cloned().collect();
            if subset.is_empty() {
                continue;
            }
            let sub: Vec<usize> =
                rank_scored(&subset, k).unwrap().into_iter().map(|(a, _)| a).collect();
            for a in &full {
                if a % 2 == 1 {
                    assert!(sub.contains(a), "{a} dropped: full {full:?} sub {sub:?}");
                }
            }
        }
    }
}
