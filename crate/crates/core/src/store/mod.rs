//! Embedding stores: global embeddings, token-level features and item
//! metadata for one dataset split.
//!
//! A store directory holds a `manifest.json` plus the `*.embt` tensors and
//! `*.mask` padding masks it references. Stores are immutable once loaded.

pub mod embt;
mod io;
mod validate;

use std::collections::HashMap;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use io::{load_store, write_store, MANIFEST_FILE};
pub use validate::{validate_store, ValidationReport, Violation, ViolationKind, MAX_CAPTIONS_PER_ITEM};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{file}: {source}")]
    Io { file: String, source: std::io::Error },
    #[error("{file}: bad magic, not an EMBT tensor")]
    BadMagic { file: String },
    #[error("{file}: unsupported EMBT version {version}")]
    UnsupportedVersion { file: String, version: u32 },
    #[error("{file}: unsupported dtype code {code}")]
    UnsupportedDType { file: String, code: u32 },
    #[error("{file}: expected {expected} tensor")]
    WrongDType { file: String, expected: &'static str },
    #[error("{file}: truncated header")]
    Truncated { file: String },
    #[error("{file}: payload is {actual} bytes, header implies {expected}")]
    PayloadSize { file: String, expected: usize, actual: usize },
    #[error("{file}: non-finite value at row {row} (byte offset {offset})")]
    NonFinite { file: String, row: usize, offset: u64 },
    #[error("{role}: manifest declares {what}={declared} but tensor header has {actual}")]
    DimensionMismatch { role: String, what: &'static str, declared: usize, actual: usize },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("store failed validation:\n{0}")]
    Invalid(ValidationReport),
}

impl StoreError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        StoreError::Io { file: path.display().to_string(), source }
    }
}

/// Dense row-major matrix of f32 vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    values: Vec<f32>,
    /// Whether rows were unit-normalised before storage. Informational only;
    /// the ranker always normalises.
    pub normalized: bool,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, dim: usize, values: Vec<f32>) -> Self {
        assert_eq!(rows * dim, values.len(), "matrix payload does not match {rows}x{dim}");
        Self { rows, dim, values, normalized: false }
    }

    pub fn from_rows<R: AsRef<[f32]>>(dim: usize, rows: &[R]) -> Self {
        let mut values = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            assert_eq!(r.as_ref().len(), dim);
            values.extend_from_slice(r.as_ref());
        }
        Self::new(rows.len(), dim, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.values.chunks_exact(self.dim.max(1))
    }
}

/// Per-item sequences of token or patch features with a padding mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenFeatureTensor {
    items: usize,
    positions: usize,
    dim: usize,
    values: Vec<f32>,
    mask: Vec<u8>,
}

impl TokenFeatureTensor {
    pub fn new(items: usize, positions: usize, dim: usize, values: Vec<f32>, mask: Vec<u8>) -> Self {
        assert_eq!(items * positions * dim, values.len(), "token payload size");
        assert_eq!(items * positions, mask.len(), "mask size");
        Self { items, positions, dim, values, mask }
    }

    pub fn items(&self) -> usize {
        self.items
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn mask(&self) -> &[u8] {
        &self.mask
    }

    /// `positions x dim` block for one item.
    pub fn item(&self, i: usize) -> &[f32] {
        let n = self.positions * self.dim;
        &self.values[i * n..(i + 1) * n]
    }

    pub fn item_mask(&self, i: usize) -> &[u8] {
        &self.mask[i * self.positions..(i + 1) * self.positions]
    }

    pub fn valid_mask(&self, i: usize) -> Vec<bool> {
        self.item_mask(i).iter().map(|&m| m != 0).collect()
    }
}

/// Several vectors per image (e.g. query-former outputs); an image is
/// scored by its best-matching vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiVectorStack {
    items: usize,
    per_item: usize,
    dim: usize,
    values: Vec<f32>,
}

impl MultiVectorStack {
    pub fn new(items: usize, per_item: usize, dim: usize, values: Vec<f32>) -> Self {
        assert_eq!(items * per_item * dim, values.len(), "multivector payload size");
        Self { items, per_item, dim, values }
    }

    pub fn items(&self) -> usize {
        self.items
    }

    pub fn per_item(&self) -> usize {
        self.per_item
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn item(&self, i: usize) -> &[f32] {
        let n = self.per_item * self.dim;
        &self.values[i * n..(i + 1) * n]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub caption_id: String,
    pub text: String,
}

/// Metadata for one image and its captions.
///
/// Human caption `j` of the item lives at row `caption_start + j` of the
/// caption matrix, and the query token tensor shares those rows. The image
/// token tensor shares rows with the image matrix, the synthetic caption
/// token tensor with the synthetic caption matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: String,
    pub image_ref: String,
    pub human_captions: Vec<Caption>,
    pub synthetic_caption: String,
    pub image_row: usize,
    pub caption_start: usize,
    pub synthetic_caption_row: usize,
}

impl ItemRecord {
    pub fn caption_rows(&self) -> Range<usize> {
        self.caption_start..self.caption_start + self.human_captions.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreMeta {
    pub backbone: String,
    pub split: String,
    pub d: usize,
    pub d_t: usize,
}

/// Where a caption id points: owning item and caption row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaptionRef {
    pub item: usize,
    pub row: usize,
    /// Position of the caption within its item's caption list.
    pub position: usize,
}

#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    pub meta: StoreMeta,
    pub image_embeddings: EmbeddingMatrix,
    pub caption_embeddings: EmbeddingMatrix,
    pub synthetic_caption_embeddings: EmbeddingMatrix,
    pub image_token_features: Option<TokenFeatureTensor>,
    pub synthetic_caption_token_features: Option<TokenFeatureTensor>,
    pub query_token_features: Option<TokenFeatureTensor>,
    pub image_multivector: Option<MultiVectorStack>,
    pub items: Vec<ItemRecord>,
    item_index: HashMap<String, usize>,
    caption_index: HashMap<String, CaptionRef>,
}

/// Everything needed to assemble an [`EmbeddingStore`].
#[derive(Debug, Clone)]
pub struct StoreParts {
    pub meta: StoreMeta,
    pub image_embeddings: EmbeddingMatrix,
    pub caption_embeddings: EmbeddingMatrix,
    pub synthetic_caption_embeddings: EmbeddingMatrix,
    pub image_token_features: Option<TokenFeatureTensor>,
    pub synthetic_caption_token_features: Option<TokenFeatureTensor>,
    pub query_token_features: Option<TokenFeatureTensor>,
    pub image_multivector: Option<MultiVectorStack>,
    pub items: Vec<ItemRecord>,
}

impl EmbeddingStore {
    /// Assembles a store without validating it; see [`validate_store`].
    pub fn from_parts(parts: StoreParts) -> Self {
        let mut item_index = HashMap::with_capacity(parts.items.len());
        let mut caption_index = HashMap::new();
        for (i, item) in parts.items.iter().enumerate() {
            item_index.entry(item.item_id.clone()).or_insert(i);
            for (j, c) in item.human_captions.iter().enumerate() {
                caption_index
                    .entry(c.caption_id.clone())
                    .or_insert(CaptionRef { item: i, row: item.caption_start + j, position: j });
            }
        }
        Self {
            meta: parts.meta,
            image_embeddings: parts.image_embeddings,
            caption_embeddings: parts.caption_embeddings,
            synthetic_caption_embeddings: parts.synthetic_caption_embeddings,
            image_token_features: parts.image_token_features,
            synthetic_caption_token_features: parts.synthetic_caption_token_features,
            query_token_features: parts.query_token_features,
            image_multivector: parts.image_multivector,
            items: parts.items,
            item_index,
            caption_index,
        }
    }

    pub fn into_parts(self) -> StoreParts {
        StoreParts {
            meta: self.meta,
            image_embeddings: self.image_embeddings,
            caption_embeddings: self.caption_embeddings,
            synthetic_caption_embeddings: self.synthetic_caption_embeddings,
            image_token_features: self.image_token_features,
            synthetic_caption_token_features: self.synthetic_caption_token_features,
            query_token_features: self.query_token_features,
            image_multivector: self.image_multivector,
            items: self.items,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.meta.d
    }

    pub fn item_index(&self, item_id: &str) -> Option<usize> {
        self.item_index.get(item_id).copied()
    }

    pub fn caption(&self, caption_id: &str) -> Option<CaptionRef> {
        self.caption_index.get(caption_id).copied()
    }

    /// Owning item of caption row `row`.
    pub fn caption_row_ref(&self, row: usize) -> Option<CaptionRef> {
        self.items.iter().enumerate().find_map(|(i, it)| {
            it.caption_rows().contains(&row).then(|| CaptionRef { item: i, row, position: row - it.caption_start })
        })
    }

    /// Image embedding of item index `item`.
    pub fn image_embedding(&self, item: usize) -> &[f32] {
        self.image_embeddings.row(self.items[item].image_row)
    }

    pub fn synthetic_caption_embedding(&self, item: usize) -> &[f32] {
        self.synthetic_caption_embeddings.row(self.items[item].synthetic_caption_row)
    }

    pub fn caption_embedding(&self, row: usize) -> &[f32] {
        self.caption_embeddings.row(row)
    }

    /// All human-caption ids in store order.
    pub fn caption_ids(&self) -> impl Iterator<Item = &str> {
        self.items.iter().flat_map(|it| it.human_captions.iter().map(|c| c.caption_id.as_str()))
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;

    /// Three items, d=4, d_t=2, p=2 patches, s=3 caption tokens.
    pub fn tiny_store() -> EmbeddingStore {
        let d = 4;
        let images = EmbeddingMatrix::from_rows(
            d,
            &[[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.5]],
        );
        let captions = EmbeddingMatrix::from_rows(
            d,
            &[
                [0.9, 0.1, 0.0, 0.0],
                [1.0, 0.2, 0.1, 0.0],
                [0.1, 0.9, 0.0, 0.0],
                [0.0, 1.0, 0.3, 0.0],
                [0.0, 0.1, 1.0, 0.4],
                [0.2, 0.0, 0.9, 0.5],
            ],
        );
        let synth = EmbeddingMatrix::from_rows(
            d,
            &[[0.8, 0.2, 0.0, 0.1], [0.1, 0.8, 0.1, 0.0], [0.0, 0.2, 0.8, 0.3]],
        );
        let tok = |items: usize, positions: usize, seed: f32| {
            let values: Vec<f32> =
                (0..items * positions * 2).map(|i| ((i as f32 + seed) * 0.37).sin()).collect();
            TokenFeatureTensor::new(items, positions, 2, values, vec![1; items * positions])
        };
        let mut caption_tokens = tok(6, 3, 0.5);
        caption_tokens.mask[2] = 0;
        let items = (0..3)
            .map(|i| ItemRecord {
                item_id: format!("item{i}"),
                image_ref: format!("images/{i}.jpg"),
                human_captions: (0..2)
                    .map(|j| Caption { caption_id: format!("c{i}_{j}"), text: format!("caption {j} of {i}") })
                    .collect(),
                synthetic_caption: format!("synthetic {i}"),
                image_row: i,
                caption_start: 2 * i,
                synthetic_caption_row: i,
            })
            .collect();
        EmbeddingStore::from_parts(StoreParts {
            meta: StoreMeta { backbone: "toy".into(), split: "test".into(), d, d_t: 2 },
            image_embeddings: images,
            caption_embeddings: captions,
            synthetic_caption_embeddings: synth,
            image_token_features: Some(tok(3, 2, 0.0)),
            synthetic_caption_token_features: Some(tok(3, 3, 1.0)),
            query_token_features: Some(caption_tokens),
            image_multivector: None,
            items,
        })
    }

    /// `n` items with 2 captions each, d=4, width `d_t`, p=2, s=3, filled
    /// with deterministic pseudo-random values.
    pub fn token_store(n: usize, d_t: usize) -> EmbeddingStore {
        let d = 4;
        let wave = |len: usize, seed: f32| -> Vec<f32> { (0..len).map(|i| ((i as f32 * 1.7 + seed) * 0.61).sin()).collect() };
        let tok = |items: usize, positions: usize, seed: f32| {
            TokenFeatureTensor::new(items, positions, d_t, wave(items * positions * d_t, seed), vec![1; items * positions])
        };
        let items = (0..n)
            .map(|i| ItemRecord {
                item_id: format!("item{i}"),
                image_ref: format!("images/{i}.jpg"),
                human_captions: (0..2)
                    .map(|j| Caption { caption_id: format!("c{i}_{j}"), text: format!("caption {j} of {i}") })
                    .collect(),
                synthetic_caption: format!("synthetic {i}"),
                image_row: i,
                caption_start: 2 * i,
                synthetic_caption_row: i,
            })
            .collect();
        EmbeddingStore::from_parts(StoreParts {
            meta: StoreMeta { backbone: "toy".into(), split: "test".into(), d, d_t },
            image_embeddings: EmbeddingMatrix::new(n, d, wave(n * d, 0.3)),
            caption_embeddings: EmbeddingMatrix::new(2 * n, d, wave(2 * n * d, 0.9)),
            synthetic_caption_embeddings: EmbeddingMatrix::new(n, d, wave(n * d, 2.1)),
            image_token_features: Some(tok(n, 2, 0.0)),
            synthetic_caption_token_features: Some(tok(n, 3, 1.0)),
            query_token_features: Some(tok(2 * n, 3, 2.0)),
            image_multivector: None,
            items,
        })
    }
}
