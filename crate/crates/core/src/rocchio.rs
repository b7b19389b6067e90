//! Rocchio query refinement.
//!
//! Three forms share one combination step `z' = a*z + b*pos - c*neg`:
//!
//! - the classical rule, with mean vectors of the top-K and bottom-K items;
//! - the extended rule, where both feedback vectors are drawn from the same
//!   top-K set, weighted by `w = softmax(s / tau)` and `1 - w` respectively,
//!   so that highly ranked but less similar items act as hard negatives;
//! - the generative variant, which is the extended rule applied to the
//!   synthetic-caption embeddings of the retrieved images.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ranker::Component;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RocchioError {
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error("feedback set is empty")]
    Empty,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid parameter {name}={value}: {reason}")]
    Param { name: &'static str, value: f64, reason: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RocchioParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
    pub k: usize,
}

impl Default for RocchioParams {
    fn default() -> Self {
        Self { alpha: 0.8, beta: 0.1, gamma: 0.1, tau: 0.05, k: 5 }
    }
}

impl RocchioParams {
    pub fn identity() -> Self {
        Self { alpha: 1.0, beta: 0.0, gamma: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), RocchioError> {
        for (name, value) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !value.is_finite() || value < 0.0 {
                return Err(RocchioError::Param { name, value, reason: "must be finite and non-negative" });
            }
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(RocchioError::BadTemperature(self.tau));
        }
        if self.k == 0 {
            return Err(RocchioError::Param { name: "k", value: 0.0, reason: "must be at least 1" });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackWeights {
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

/// Result of a refinement with its ingredients kept for inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementBreakdown {
    pub refined_query: Vec<f64>,
    pub positive_vector: Vec<f64>,
    pub negative_vector: Vec<f64>,
    pub positive_weights: Vec<f64>,
    pub negative_weights: Vec<f64>,
}

/// Numerically stable softmax of `x / tau`.
pub fn softmax_with_temperature(x: &[f64], tau: f64) -> Result<Vec<f64>, RocchioError> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(RocchioError::BadTemperature(tau));
    }
    if x.is_empty() {
        return Err(RocchioError::Empty);
    }
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| ((v - max) / tau).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Positive weights `softmax(s / tau)` and negative weights `1 - w`.
pub fn feedback_weights(similarities: &[f64], tau: f64) -> Result<FeedbackWeights, RocchioError> {
    let positive = softmax_with_temperature(similarities, tau)?;
    let negative = positive.iter().map(|w| 1.0 - w).collect();
    Ok(FeedbackWeights { positive, negative })
}

/// `sum_i w_i * rows_i`.
pub fn weighted_sum<A: Component, R: AsRef<[A]>>(rows: &[R], weights: &[f64], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for (row, &w) in rows.iter().zip(weights) {
        for (o, &v) in out.iter_mut().zip(row.as_ref()) {
            *o += w * v.widen();
        }
    }
    out
}

/// `alpha*query + beta*pos - gamma*neg`, skipping zero-coefficient terms so
/// the identity parameters reproduce the query bit for bit.
pub fn combine(query: &[f64], pos: &[f64], neg: &[f64], alpha: f64, beta: f64, gamma: f64) -> Vec<f64> {
    query
        .iter()
        .enumerate()
        .map(|(i, &q)| {
            let mut v = if alpha == 1.0 { q } else { alpha * q };
            if beta != 0.0 {
                v += beta * pos[i];
            }
            if gamma != 0.0 {
                v -= gamma * neg[i];
            }
            v
        })
        .collect()
}

fn check_rows<A, R: AsRef<[A]>>(rows: &[R], dim: usize) -> Result<(), RocchioError> {
    if rows.is_empty() {
        return Err(RocchioError::Empty);
    }
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.as_ref().len() != dim) {
        return Err(RocchioError::Shape(format!("row {i} has length {}, query has {dim}", r.as_ref().len())));
    }
    Ok(())
}

/// Refinement with caller-supplied weights over one feedback set.
pub fn refine_with_weights<A: Component, R: AsRef<[A]>>(
    query: &[f64],
    rows: &[R],
    weights: FeedbackWeights,
    params: &RocchioParams,
) -> Result<RefinementBreakdown, RocchioError> {
    check_rows(rows, query.len())?;
    if weights.positive.len() != rows.len() || weights.negative.len() != rows.len() {
        return Err(RocchioError::Shape(format!(
            "{} rows but {} positive / {} negative weights",
            rows.len(),
            weights.positive.len(),
            weights.negative.len()
        )));
    }
    let d = query.len();
    let positive_vector = weighted_sum(rows, &weights.positive, d);
    let negative_vector = weighted_sum(rows, &weights.negative, d);
    let refined_query = combine(query, &positive_vector, &negative_vector, params.alpha, params.beta, params.gamma);
    Ok(RefinementBreakdown {
        refined_query,
        positive_vector,
        negative_vector,
        positive_weights: weights.positive,
        negative_weights: weights.negative,
    })
}

/// Softmax-weighted refinement over the top-K candidates.
pub fn refine_extended<A: Component, R: AsRef<[A]>>(
    query: &[f64],
    candidates: &[R],
    similarities: &[f64],
    params: &RocchioParams,
) -> Result<RefinementBreakdown, RocchioError> {
    if similarities.len() != candidates.len() {
        return Err(RocchioError::Shape(format!(
            "{} candidates but {} similarities",
            candidates.len(),
            similarities.len()
        )));
    }
    let weights = feedback_weights(similarities, params.tau)?;
    refine_with_weights(query, candidates, weights, params)
}

/// The extended rule over synthetic-caption embeddings of the retrieved
/// images, weighted by the query-image similarities.
pub fn refine_grf<A: Component, R: AsRef<[A]>>(
    query: &[f64],
    caption_embeddings: &[R],
    similarities: &[f64],
    params: &RocchioParams,
) -> Result<RefinementBreakdown, RocchioError> {
    refine_extended(query, caption_embeddings, similarities, params)
}

/// Classical rule: mean of the relevant set minus mean of the non-relevant set.
pub fn refine_original<A: Component, R: AsRef<[A]>>(
    query: &[f64],
    relevant: &[R],
    nonrelevant: &[R],
    params: &RocchioParams,
) -> Result<RefinementBreakdown, RocchioError> {
    check_rows(relevant, query.len())?;
    check_rows(nonrelevant, query.len())?;
    let d = query.len();
    let wr = vec![1.0 / relevant.len() as f64; relevant.len()];
    let wn = vec![1.0 / nonrelevant.len() as f64; nonrelevant.len()];
    let positive_vector = weighted_sum(relevant, &wr, d);
    let negative_vector = weighted_sum(nonrelevant, &wn, d);
    let refined_query = combine(query, &positive_vector, &negative_vector, params.alpha, params.beta, params.gamma);
    Ok(RefinementBreakdown {
        refined_query,
        positive_vector,
        negative_vector,
        positive_weights: wr,
        negative_weights: wn,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn oracle_extended(q: &[f64], z: &[Vec<f64>], s: &[f64], p: &RocchioParams) -> Vec<f64> {
        let mut denom = 0.0;
        for &si in s {
            denom += (si / p.tau).exp();
        }
        let mut out = vec![0.0; q.len()];
        for j in 0..q.len() {
            let mut pos = 0.0;
            let mut neg = 0.0;
            for i in 0..z.len() {
                let w = (s[i] / p.tau).exp() / denom;
                pos += w * z[i][j];
                neg += (1.0 - w) * z[i][j];
            }
            out[j] = p.alpha * q[j] + p.beta * pos - p.gamma * neg;
        }
        out
    }

    #[test]
    fn weight_examples() {
        let w = feedback_weights(&[0.5, 0.5], 0.3).unwrap();
        assert_eq!(w.positive, [0.5, 0.5]);
        assert_eq!(w.negative, [0.5, 0.5]);
        let w = feedback_weights(&[0.7], 0.05).unwrap();
        assert_eq!(w.positive, [1.0]);
        assert_eq!(w.negative, [0.0]);
        let w = feedback_weights(&[1.0, 0.0], 0.05).unwrap();
        let e = (-20.0f64).exp();
        assert_relative_eq!(w.positive[0], 1.0 / (1.0 + e), max_relative = 1e-12);
        assert_relative_eq!(w.positive[1], e / (1.0 + e), max_relative = 1e-9);
        assert_relative_eq!(w.positive[1], 2.06e-9, max_relative = 1e-2);
        assert!(feedback_weights(&[1.0], 0.0).is_err());
        assert!(feedback_weights(&[], 0.1).is_err());
    }

    #[test]
    fn identity_parameters_return_query_bit_exactly() {
        let q = [-0.0, 1.5, -2.25e-7];
        let z = [[1.0f32, 2.0, 3.0]];
        let r = refine_extended(&q, &z, &[0.3], &RocchioParams::identity()).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&r.refined_query), bits(&q));
    }

    #[test]
    fn single_candidate_extended() {
        let q = [1.0, 0.0];
        let z = [[0.0, 2.0]];
        let r = refine_extended(&q, &z, &[0.1], &RocchioParams::default()).unwrap();
        assert_relative_eq!(r.refined_query[0], 0.8, epsilon = 1e-15);
        assert_relative_eq!(r.refined_query[1], 0.2, epsilon = 1e-15);
    }

    #[test]
    fn original_examples() {
        let p = RocchioParams { alpha: 0.8, beta: 0.2, gamma: 0.2, ..Default::default() };
        let q = [1.0, 1.0];
        let r = refine_original(&q, &[[2.0, 0.0]], &[[0.0, 4.0]], &p).unwrap();
        assert_relative_eq!(r.refined_query[0], 0.8 + 0.4, epsilon = 1e-15);
        assert_relative_eq!(r.refined_query[1], 0.8 - 0.8, epsilon = 1e-15);
        let r = refine_original(&q, &[[3.0, -1.0]], &[[3.0, -1.0]], &p).unwrap();
        assert_relative_eq!(r.refined_query[0], 0.8, epsilon = 1e-15);
        assert_relative_eq!(r.refined_query[1], 0.8, epsilon = 1e-15);
    }

    #[test]
    fn grf_with_image_rows_equals_extended() {
        let q = [0.3, -0.2, 0.9];
        let rows = [[0.1, 0.2, 0.3], [0.5, -0.4, 0.2]];
        let s = [0.4, 0.1];
        let p = RocchioParams::default();
        assert_eq!(refine_grf(&q, &rows, &s, &p).unwrap(), refine_extended(&q, &rows, &s, &p).unwrap());
        let zero = RocchioParams { beta: 0.0, gamma: 0.0, alpha: 1.0, ..p };
        assert_eq!(refine_grf(&q, &rows, &s, &zero).unwrap().refined_query, q);
    }

    #[test]
    fn large_temperature_is_uniform() {
        let s = [0.9, 0.1, -0.4, 0.33, 0.0];
        let w = feedback_weights(&s, 1e6).unwrap();
        for x in w.positive {
            assert!((x - 0.2).abs() < 1e-4);
        }
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<Vec<f64>>, Vec<f64>)> {
        (1usize..=16, 1usize..=8).prop_flat_map(|(d, k)| {
            (
                prop::collection::vec(-1.0f64..1.0, d),
                prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), k),
                prop::collection::vec(-1.0f64..1.0, k),
            )
        })
    }

    proptest! {
        #[test]
        fn extended_matches_oracle((q, z, s) in instance(), tau in prop::sample::select(vec![0.05, 0.1, 0.25, 0.5])) {
            let p = RocchioParams { tau, ..Default::default() };
            let got = refine_extended(&q, &z, &s, &p).unwrap();
            let want = oracle_extended(&q, &z, &s, &p);
            for (a, b) in got.refined_query.iter().zip(&want) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
            // Recomposition from the breakdown.
            for (j, qj) in q.iter().enumerate() {
                let r = p.alpha * qj + p.beta * got.positive_vector[j] - p.gamma * got.negative_vector[j];
                prop_assert!((r - got.refined_query[j]).abs() <= 1e-12);
            }
        }

        #[test]
        fn weights_are_a_distribution(s in prop::collection::vec(-1.0f64..1.0, 1..=64),
                                      tau in prop::sample::select(vec![0.05, 0.1, 0.25, 0.5])) {
            let w = feedback_weights(&s, tau).unwrap();
            prop_assert!((w.positive.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            for i in 0..s.len() {
                prop_assert_eq!(w.negative[i], 1.0 - w.positive[i]);
                for j in 0..s.len() {
                    if s[i] > s[j] {
                        prop_assert!(w.positive[i] > w.positive[j]);
                    }
                }
            }
        }

        #[test]
        fn joint_scaling_scales_output((q, z, s) in instance(), lambda in 0.1f64..10.0) {
            let p = RocchioParams::default();
            let scaled = RocchioParams { alpha: p.alpha * lambda, beta: p.beta * lambda, gamma: p.gamma * lambda, ..p };
            let a = refine_extended(&q, &z, &s, &p).unwrap().refined_query;
            let b = refine_extended(&q, &z, &s, &scaled).unwrap().refined_query;
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x * lambda - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
    }
}
