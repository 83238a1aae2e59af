//! Single-relevant ranking metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cutoffs reported for recall.
pub const RECALL_KS: [usize; 3] = [1, 2, 5];

/// 1-based rank of `truth` under descending score. Ties go to the lower
/// candidate index.
pub fn rank_of(scores: &[f64], truth: usize) -> Result<usize> {
    if truth >= scores.len() {
        return Err(Error::data(None, format!("truth index {truth} out of range for {} candidates", scores.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score in ranking".into()));
    }
    let t = scores[truth];
    let ahead = scores.iter().enumerate().filter(|&(j, &s)| s > t || (s == t && j < truth)).count();
    Ok(ahead + 1)
}

/// With one relevant item this is `1 / rank`.
pub fn average_precision(scores: &[f64], truth: usize) -> Result<f64> {
    Ok(1.0 / rank_of(scores, truth)? as f64)
}

pub fn recall_at_k(scores: &[f64], truth: usize, k: usize) -> Result<bool> {
    if k == 0 || k > scores.len() {
        return Err(Error::config(format!("recall cutoff {k} outside 1..={}", scores.len())));
    }
    Ok(rank_of(scores, truth)? <= k)
}

/// Running sums for MAP and recall; adding ranks in any order gives the same
/// result.
#[derive(Debug, Clone, Default)]
pub struct RankTally {
    n: usize,
    ap_sum: f64,
    hits: BTreeMap<usize, usize>,
    n_candidates: usize,
}

impl RankTally {
    pub fn new(n_candidates: usize) -> Self {
        RankTally { n_candidates, ..Default::default() }
    }

    pub fn add_rank(&mut self, rank: usize) {
        self.n += 1;
        self.ap_sum += 1.0 / rank as f64;
        for k in RECALL_KS.iter().copied().filter(|&k| k <= self.n_candidates) {
            *self.hits.entry(k).or_default() += usize::from(rank <= k);
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn finish(&self) -> RankingMetrics {
        let n = self.n.max(1) as f64;
        let recall_at = RECALL_KS
            .iter()
            .filter(|&&k| k <= self.n_candidates)
            .map(|&k| (k, *self.hits.get(&k).unwrap_or(&0) as f64 / n))
            .collect();
        RankingMetrics { map: self.ap_sum / n, recall_at, n_samples: self.n }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub map: f64,
    /// Cutoff k (only those not exceeding the candidate count) to recall.
    pub recall_at: BTreeMap<usize, f64>,
    pub n_samples: usize,
}

impl RankingMetrics {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recall_at.get(&k).copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Rank by sorting indices: descending score, then ascending index.
    fn sorted_rank(scores: &[f64], truth: usize) -> usize {
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        idx.iter().position(|&i| i == truth).unwrap() + 1
    }

    #[test]
    fn closed_forms() {
        let s = [0.9, 0.1, 0.5, 0.7, 0.2, 0.3, 0.4, 0.6, 0.05, 0.0];
        assert_eq!(average_precision(&s, 0).unwrap(), 1.0);
        assert_eq!(average_precision(&s, 7).unwrap(), 1.0 / 3.0);
        assert!(recall_at_k(&[0.2, 0.9], 0, 2).unwrap());
        assert!(!recall_at_k(&[0.2, 0.9], 0, 1).unwrap());
    }

    #[test]
    fn ties_favour_lower_index() {
        let s = [0.5, 0.5, 0.5];
        assert_eq!(rank_of(&s, 0).unwrap(), 1);
        assert_eq!(rank_of(&s, 2).unwrap(), 3);
    }

    #[test]
    fn bad_inputs() {
        assert!(rank_of(&[0.1], 1).is_err());
        assert!(recall_at_k(&[0.1, 0.2], 0, 3).is_err());
        assert!(recall_at_k(&[0.1, 0.2], 0, 0).is_err());
        assert!(matches!(rank_of(&[f64::NAN, 0.2], 1), Err(Error::Numeric(_))));
    }

    proptest! {
        #[test]
        fn rank_matches_sort_oracle(scores in prop::collection::vec(prop_oneof![0.0..1.0f64, Just(0.5)], 1..12), t in 0usize..12) {
            let t = t % scores.len();
            prop_assert_eq!(rank_of(&scores, t).unwrap(), sorted_rank(&scores, t));
        }

        #[test]
        fn recall_is_monotone_and_full_at_tc(scores in prop::collection::vec(0.0..1.0f64, 1..12), t in 0usize..12) {
            let t = t % scores.len();
            let r: Vec<bool> = (1..=scores.len()).map(|k| recall_at_k(&scores, t, k).unwrap()).collect();
            prop_assert!(r.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(r[scores.len() - 1]);
        }
    }
}
