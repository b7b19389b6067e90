//! Two-component PCA of pooled embeddings.
//!
//! Components come from power iteration with deflation on the sample
//! covariance, which is all a 2-D scatter needs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::afs::{match_norm, AfsError, AfsModel};
use crate::eval::query_ids;
use crate::ranker::{rank, RankError};
use crate::store::EmbeddingStore;

const MAX_ITERS: usize = 10_000;
const TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum PcaError {
    #[error("need at least 3 vectors, got {0}")]
    TooFewVectors(usize),
    #[error("vector {index} has dimension {got}, expected {expected}")]
    Dimension { index: usize, got: usize, expected: usize },
    #[error("vector {0} contains a non-finite value")]
    NonFinite(usize),
    #[error("need dimension at least 2, got {0}")]
    TooFewDims(usize),
    #[error(transparent)]
    Rank(#[from] RankError),
    #[error(transparent)]
    Afs(#[from] AfsError),
}

/// Mean and top-2 principal axes of a point set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit-norm axes, first with the larger variance.
    pub components: [Vec<f64>; 2],
    /// Sample variance along each axis.
    pub variances: [f64; 2],
}

impl Pca {
    pub fn project(&self, v: &[f64]) -> (f64, f64) {
        let c: Vec<f64> = v.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        (dot(&c, &self.components[0]), dot(&c, &self.components[1]))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Sign convention: the largest-magnitude entry is positive.
fn canonical_sign(v: &mut [f64]) {
    let lead = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
    if lead < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

fn mat_vec(m: &[f64], v: &[f64]) -> Vec<f64> {
    m.chunks(v.len()).map(|row| dot(row, v)).collect()
}

/// Dominant eigenpair of a symmetric positive semi-definite matrix.
fn power_iteration(m: &[f64], d: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, f64) {
    let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    normalize(&mut v);
    let mut lambda = 0.0;
    for _ in 0..MAX_ITERS {
        let mut w = mat_vec(m, &v);
        let n = normalize(&mut w);
        if n == 0.0 {
            // Null matrix: keep the current unit vector.
            return (v, 0.0);
        }
        let delta = v.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = w;
        lambda = n;
        if delta < TOL {
            break;
        }
    }
    (v, lambda)
}

/// Top-2 principal components of `data` (one vector per row).
pub fn fit<R: AsRef<[f64]>>(data: &[R], seed: u64) -> Result<Pca, PcaError> {
    let n = data.len();
    if n < 3 {
        return Err(PcaError::TooFewVectors(n));
    }
    let d = data[0].as_ref().len();
    if d < 2 {
        return Err(PcaError::TooFewDims(d));
    }
    for (index, row) in data.iter().enumerate() {
        let row = row.as_ref();
        if row.len() != d {
            return Err(PcaError::Dimension { index, got: row.len(), expected: d });
        }
        if row.iter().any(|x| !x.is_finite()) {
            return Err(PcaError::NonFinite(index));
        }
    }
    let mut mean = vec![0.0; d];
    for row in data {
        mean.iter_mut().zip(row.as_ref()).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    for row in data {
        let c: Vec<f64> = row.as_ref().iter().zip(&mean).map(|(x, m)| x - m).collect();
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] += c[i] * c[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / (n - 1) as f64;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut v1, l1) = power_iteration(&cov, d, &mut rng);
    for i in 0..d {
        for j in 0..d {
            cov[i * d + j] -= l1 * v1[i] * v1[j];
        }
    }
    let (mut v2, l2) = power_iteration(&cov, d, &mut rng);
    // Re-orthogonalise against drift from the deflated solve.
    let p = dot(&v2, &v1);
    v2.iter_mut().zip(&v1).for_each(|(a, b)| *a -= p * b);
    normalize(&mut v2);
    canonical_sign(&mut v1);
    canonical_sign(&mut v2);
    Ok(Pca { mean, components: [v1, v2], variances: [l1, l2.max(0.0)] })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointKind {
    Query,
    Image,
    Afs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaRow {
    pub x: f64,
    pub y: f64,
    pub kind: PointKind,
    /// Caption id for query and AFS points, item id for images.
    pub id: String,
}

/// Projects query, image and (with a model) AFS summary embeddings onto
/// their pooled top-2 components. AFS points use the first-turn feedback
/// and the norm-matched summary that enters refinement.
pub fn project_store(
    store: &EmbeddingStore,
    model: Option<&AfsModel>,
    with_captions: bool,
    max_queries: Option<usize>,
    seed: u64,
) -> Result<(Pca, Vec<PcaRow>), PcaError> {
    let mut ids = query_ids(store);
    if let Some(n) = max_queries {
        ids.truncate(n);
    }
    let mut vectors: Vec<Vec<f64>> = Vec::new();
    let mut meta: Vec<(PointKind, String)> = Vec::new();
    for id in &ids {
        let cref = store.caption(id).expect("query ids come from the store");
        let q: Vec<f64> = store.caption_embedding(cref.row).iter().map(|&v| v as f64).collect();
        if let Some(m) = model {
            let feedback = rank(&q, store, m.config.k, id)?.indices();
            let inf = m.infer(store, cref.row, &feedback, with_captions, None)?;
            vectors.push(match_norm(&inf.z_cls, &q));
            meta.push((PointKind::Afs, id.clone()));
        }
        vectors.push(q);
        meta.push((PointKind::Query, id.clone()));
    }
    for (i, item) in store.items.iter().enumerate() {
        vectors.push(store.image_embedding(i).iter().map(|&v| v as f64).collect());
        meta.push((PointKind::Image, item.item_id.clone()));
    }
    let pca = fit(&vectors, seed)?;
    let rows = vectors
        .iter()
        .zip(meta)
        .map(|(v, (kind, id))| {
            let (x, y) = pca.project(v);
            PcaRow { x, y, kind, id }
        })
        .collect();
    Ok((pca, rows))
}
