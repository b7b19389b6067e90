//! Exhaustive cosine ranking over a store plus Hits@K / MRR@K.
//!
//! Stored vectors are f32; every dot product and norm accumulates in f64.
//! Ties are broken by ascending `item_id` so rankings are reproducible.

mod metrics;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::EmbeddingStore;

pub use metrics::{hits_at_k, mrr_at_k, MetricsError, MetricsReport, TurnMetrics};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RankError {
    #[error("zero-norm vector ({0})")]
    ZeroNorm(&'static str),
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("cannot rank against an empty store")]
    EmptyStore,
    #[error("k must be at least 1")]
    ZeroK,
}

/// Anything that widens losslessly to f64.
pub trait Component: Copy {
    fn widen(self) -> f64;
}

impl Component for f32 {
    fn widen(self) -> f64 {
        self as f64
    }
}

impl Component for f64 {
    fn widen(self) -> f64 {
        self
    }
}

pub fn dot<A: Component, B: Component>(a: &[A], b: &[B]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x.widen() * y.widen()).sum()
}

pub fn norm<A: Component>(a: &[A]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine_similarity<A: Component, B: Component>(a: &[A], b: &[B]) -> Result<f64, RankError> {
    if a.len() != b.len() {
        return Err(RankError::DimensionMismatch { left: a.len(), right: b.len() });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 {
        return Err(RankError::ZeroNorm("left"));
    }
    if nb == 0.0 {
        return Err(RankError::ZeroNorm("right"));
    }
    Ok(dot(a, b) / (na * nb))
}

/// Best cosine between `query` and any of the `rows` (flattened `k x d`).
pub fn score_multivector<A: Component, B: Component>(rows: &[A], query: &[B]) -> Result<f64, RankError> {
    let d = query.len();
    if d == 0 || rows.is_empty() || rows.len() % d != 0 {
        return Err(RankError::DimensionMismatch { left: rows.len(), right: d });
    }
    let qn = norm(query);
    if qn == 0.0 {
        return Err(RankError::ZeroNorm("query"));
    }
    let mut best = f64::NEG_INFINITY;
    for row in rows.chunks_exact(d) {
        let rn = norm(row);
        if rn == 0.0 {
            return Err(RankError::ZeroNorm("multivector row"));
        }
        best = best.max(dot(row, query) / (rn * qn));
    }
    Ok(best)
}

/// Scores every item in store order. Uses the image multivector stack when
/// the store carries one, global image embeddings otherwise.
pub fn score_all(query: &[f64], store: &EmbeddingStore) -> Result<Vec<f64>, RankError> {
    if query.len() != store.dim() {
        return Err(RankError::DimensionMismatch { left: query.len(), right: store.dim() });
    }
    let qn = norm(query);
    if qn == 0.0 {
        return Err(RankError::ZeroNorm("query"));
    }
    match &store.image_multivector {
        Some(mv) => (0..store.len()).map(|i| score_multivector(mv.item(store.items[i].image_row), query)).collect(),
        None => (0..store.len())
            .map(|i| {
                let row = store.image_embedding(i);
                let rn = norm(row);
                if rn == 0.0 {
                    return Err(RankError::ZeroNorm("image"));
                }
                Ok(dot(row, query) / (rn * qn))
            })
            .collect(),
    }
}

/// Ranking order: higher score first, then ascending item id.
pub fn compare(store: &EmbeddingStore, scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b]
        .partial_cmp(&scores[a])
        .unwrap_or(Ordering::Equal)
        .then_with(|| store.items[a].item_id.cmp(&store.items[b].item_id))
}

/// Every item index sorted by [`compare`].
pub fn full_order(store: &EmbeddingStore, scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| compare(store, scores, a, b));
    order
}

/// 1-based position `item` would take in the full ranking.
pub fn rank_of(store: &EmbeddingStore, scores: &[f64], item: usize) -> usize {
    1 + (0..scores.len()).filter(|&j| compare(store, scores, j, item) == Ordering::Less).count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub item_id: String,
    /// Index into `store.items`.
    pub index: usize,
    pub score: f64,
}

/// Top-k candidates in ranking order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub query_id: String,
    pub k: usize,
    pub candidates: Vec<Candidate>,
    /// Set when the requested k exceeded the store size.
    #[serde(default)]
    pub clamped: bool,
}

impl CandidateSet {
    pub fn indices(&self) -> Vec<usize> {
        self.candidates.iter().map(|c| c.index).collect()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.candidates.iter().map(|c| c.score).collect()
    }

    pub fn item_ids(&self) -> Vec<&str> {
        self.candidates.iter().map(|c| c.item_id.as_str()).collect()
    }

    pub fn contains(&self, item_id: &str) -> bool {
        self.candidates.iter().any(|c| c.item_id == item_id)
    }

    pub fn position(&self, item: usize) -> Option<usize> {
        self.candidates.iter().position(|c| c.index == item).map(|p| p + 1)
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

pub(crate) fn top_from_scores(store: &EmbeddingStore, scores: &[f64], k: usize, query_id: &str) -> CandidateSet {
    let n = scores.len();
    let clamped = k > n;
    if clamped {
        log::warn!("k={k} exceeds store size {n}; clamping");
    }
    let k = k.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    if k < n {
        order.select_nth_unstable_by(k - 1, |&a, &b| compare(store, scores, a, b));
        order.truncate(k);
    }
    order.sort_by(|&a, &b| compare(store, scores, a, b));
    CandidateSet {
        query_id: query_id.to_string(),
        k,
        candidates: order
            .into_iter()
            .map(|i| Candidate { item_id: store.items[i].item_id.clone(), index: i, score: scores[i] })
            .collect(),
        clamped,
    }
}

/// Top-`k` items for `query`. A `k` larger than the store is clamped and
/// flagged on the result.
pub fn rank(query: &[f64], store: &EmbeddingStore, k: usize, query_id: &str) -> Result<CandidateSet, RankError> {
    if k == 0 {
        return Err(RankError::ZeroK);
    }
    if store.is_empty() {
        return Err(RankError::EmptyStore);
    }
    let scores = score_all(query, store)?;
    Ok(top_from_scores(store, &scores, k, query_id))
}

/// Indices of the `k` lowest-ranked items, lowest last.
pub fn bottom_k(store: &EmbeddingStore, scores: &[f64], k: usize) -> Vec<usize> {
    let order = full_order(store, scores);
    let k = k.min(order.len());
    order[order.len() - k..].to_vec()
}
