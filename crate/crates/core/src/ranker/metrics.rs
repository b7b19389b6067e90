use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no queries to evaluate")]
    Empty,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("rank 0 is not a valid 1-based rank")]
    ZeroRank,
}

fn check(ranks: &[Option<usize>], k: usize) -> Result<(), MetricsError> {
    if ranks.is_empty() {
        return Err(MetricsError::Empty);
    }
    if k == 0 {
        return Err(MetricsError::ZeroK);
    }
    if ranks.contains(&Some(0)) {
        return Err(MetricsError::ZeroRank);
    }
    Ok(())
}

/// Fraction of queries whose ground truth sits at rank `<= k`. `None` means
/// not retrieved.
pub fn hits_at_k(ranks: &[Option<usize>], k: usize) -> Result<f64, MetricsError> {
    check(ranks, k)?;
    let hits = ranks.iter().filter(|r| matches!(r, Some(r) if *r <= k)).count();
    Ok(hits as f64 / ranks.len() as f64)
}

/// Mean reciprocal rank with ranks beyond `k` counted as zero.
pub fn mrr_at_k(ranks: &[Option<usize>], k: usize) -> Result<f64, MetricsError> {
    check(ranks, k)?;
    let total: f64 = ranks
        .iter()
        .map(|r| match r {
            Some(r) if *r <= k => 1.0 / *r as f64,
            _ => 0.0,
        })
        .sum();
    Ok(total / ranks.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TurnMetrics {
    pub turn: usize,
    #[serde(rename = "hits@1")]
    pub hits_at_1: f64,
    #[serde(rename = "hits@5")]
    pub hits_at_5: f64,
    #[serde(rename = "mrr@5")]
    pub mrr_at_5: f64,
    pub n_queries: usize,
}

impl TurnMetrics {
    pub fn from_ranks(turn: usize, ranks: &[Option<usize>]) -> Result<Self, MetricsError> {
        Ok(Self {
            turn,
            hits_at_1: hits_at_k(ranks, 1)?,
            hits_at_5: hits_at_k(ranks, 5)?,
            mrr_at_5: mrr_at_k(ranks, 5)?,
            n_queries: ranks.len(),
        })
    }

    pub fn is_ordered(&self) -> bool {
        self.hits_at_1 <= self.mrr_at_5 && self.mrr_at_5 <= self.hits_at_5
    }
}

/// Metrics for one strategy. The top-level numbers describe the final turn;
/// `per_turn` carries every turn, starting at turn 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub strategy: String,
    pub turn: usize,
    #[serde(rename = "hits@1")]
    pub hits_at_1: f64,
    #[serde(rename = "hits@5")]
    pub hits_at_5: f64,
    #[serde(rename = "mrr@5")]
    pub mrr_at_5: f64,
    pub n_queries: usize,
    pub per_turn: Vec<TurnMetrics>,
}

impl MetricsReport {
    /// `ranks_per_turn[t][q]` is the ground-truth rank of query `q` at turn `t + 1`.
    pub fn from_turn_ranks(strategy: &str, ranks_per_turn: &[Vec<Option<usize>>]) -> Result<Self, MetricsError> {
        let per_turn = ranks_per_turn
            .iter()
            .enumerate()
            .map(|(t, r)| TurnMetrics::from_ranks(t + 1, r))
            .collect::<Result<Vec<_>, _>>()?;
        let last = *per_turn.last().ok_or(MetricsError::Empty)?;
        Ok(Self {
            strategy: strategy.to_string(),
            turn: last.turn,
            hits_at_1: last.hits_at_1,
            hits_at_5: last.hits_at_5,
            mrr_at_5: last.mrr_at_5,
            n_queries: last.n_queries,
            per_turn,
        })
    }

    pub fn turn(&self, t: usize) -> Option<&TurnMetrics> {
        self.per_turn.iter().find(|m| m.turn == t)
    }

    pub fn first(&self) -> &TurnMetrics {
        &self.per_turn[0]
    }

    pub fn is_ordered(&self) -> bool {
        self.per_turn.iter().all(TurnMetrics::is_ordered)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mrr_examples() {
        assert_eq!(mrr_at_k(&[Some(1), Some(1), Some(1)], 5).unwrap(), 1.0);
        assert_eq!(mrr_at_k(&[Some(4)], 5).unwrap(), 0.25);
        assert_eq!(mrr_at_k(&[Some(1), Some(3), Some(7)], 5).unwrap(), (1.0 + 1.0 / 3.0) / 3.0);
        assert!((mrr_at_k(&[Some(1), Some(3), Some(7)], 5).unwrap() - 0.4444).abs() < 5e-5);
        assert_eq!(mrr_at_k(&[], 5), Err(MetricsError::Empty));
    }

    #[test]
    fn hits_examples() {
        assert_eq!(hits_at_k(&[Some(1), Some(3), Some(7)], 5).unwrap(), 2.0 / 3.0);
        assert_eq!(hits_at_k(&[Some(6)], 5).unwrap(), 0.0);
        assert_eq!(hits_at_k(&[Some(1), Some(9), Some(4)], 9).unwrap(), 1.0);
        assert_eq!(hits_at_k(&[None], 5).unwrap(), 0.0);
    }

    #[test]
    fn json_keys() {
        let r = MetricsReport::from_turn_ranks("none", &[vec![Some(1), Some(2)]]).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        for key in ["hits@1", "hits@5", "mrr@5", "n_queries", "turn"] {
            assert!(v.get(key).is_some(), "missing {key}");
            assert!(v["per_turn"][0].get(key).is_some(), "missing per-turn {key}");
        }
    }

    proptest! {
        #[test]
        fn ordering_invariant(ranks in prop::collection::vec(prop::option::of(1usize..20), 1..100)) {
            let m = TurnMetrics::from_ranks(1, &ranks).unwrap();
            prop_assert!(m.is_ordered());
        }
    }
}
