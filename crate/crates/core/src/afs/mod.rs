//! Attentive feedback summarizer.
//!
//! A two-block transformer that reads the token features of a query and the
//! patch/token features of the top-K retrieved items (the relevance
//! sequence) and emits a summary vector in the global embedding space:
//!
//! ```text
//! h = [CLS; query tokens]
//! r = LN(proj(relevance sequence))
//! h = h + CrossAttn(LN(h), r)      (cross-attention scores kept)
//! h = h + SelfAttn(LN(h))
//! z_cls = W_out h[CLS] + b_out
//! ```
//!
//! `z_cls` is the positive vector of a Rocchio update; the negative vector
//! weights each retrieved image and synthetic caption by `softmax(-A / tau)`
//! of its accumulated cross-attention `A` ([`inference`]).

mod checkpoint;
mod forward;
pub mod inference;
mod params;
mod sequence;
mod train;

#[cfg(test)]
mod tests;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rocchio::RocchioError;
use crate::store::StoreError;
use crate::tensor::TensorError;

pub use checkpoint::{load_checkpoint, save_checkpoint, AFS_CONFIG_FILE, PARAMS_FILE};
pub use forward::{batch_loss, batch_objective, forward, gradcheck_objective, loss_caption, loss_image, AfsForward, LossReport};
pub use inference::{
    accumulate_item_scores, apply_region_bias, negative_weights, position_scores, refine_query_afs, region_bias_vector,
    saliency, ItemSaliency, ItemScores, Polarity, RegionBox,
};
pub use params::AfsParams;
pub use sequence::{build_relevance_sequence, Modality, RelevanceSequence, Segment};
pub use train::{prepare_examples, train, train_examples, EpochRecord, TrainConfig, TrainExample, TrainHistory};

use crate::ranker::Component;
use crate::rocchio::{RefinementBreakdown, RocchioParams};
use crate::store::EmbeddingStore;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Error)]
pub enum AfsError {
    #[error("invalid AFS configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Rocchio(#[from] RocchioError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("store has no {0}")]
    MissingFeatures(&'static str),
    #[error("{0}")]
    Input(String),
    #[error("region box on feedback item {item}: patch {patch} outside 0..{p}")]
    PatchOutOfRange { item: usize, patch: usize, p: usize },
    #[error("region box references feedback item {item} but only {k} items are in the sequence")]
    ItemOutOfRange { item: usize, k: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    #[default]
    ImageOnly,
    CaptionOnly,
    Both,
}

impl LossMode {
    pub fn uses_image(self) -> bool {
        matches!(self, LossMode::ImageOnly | LossMode::Both)
    }

    pub fn uses_caption(self) -> bool {
        matches!(self, LossMode::CaptionOnly | LossMode::Both)
    }

    pub fn name(self) -> &'static str {
        match self {
            LossMode::ImageOnly => "img",
            LossMode::CaptionOnly => "cap",
            LossMode::Both => "both",
        }
    }
}

impl std::str::FromStr for LossMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "img" | "image" | "image_only" => Ok(LossMode::ImageOnly),
            "cap" | "caption" | "caption_only" => Ok(LossMode::CaptionOnly),
            "both" => Ok(LossMode::Both),
            other => Err(format!("unknown loss mode {other:?} (expected img, cap or both)")),
        }
    }
}

/// Model shape and initialisation seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AfsConfig {
    /// Token feature width; also the model width.
    pub d_t: usize,
    /// Global embedding width of the output projection.
    pub d: usize,
    pub n_h: usize,
    /// Synthetic caption tokens per item.
    pub s: usize,
    /// Image patches per item.
    pub p: usize,
    /// Query tokens (padded).
    pub s_q: usize,
    /// Feedback items.
    pub k: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
    /// Adds a feed-forward sublayer after each attention block.
    #[serde(default)]
    pub ffn: bool,
}

impl AfsConfig {
    /// Shape taken from the store's tensors, with `n_h` heads and `k` items.
    pub fn for_store(store: &EmbeddingStore, n_h: usize, k: usize, seed: u64) -> Result<Self, AfsError> {
        let img = store.image_token_features.as_ref().ok_or(AfsError::MissingFeatures("image token features"))?;
        let query = store.query_token_features.as_ref().ok_or(AfsError::MissingFeatures("query token features"))?;
        let s = store.synthetic_caption_token_features.as_ref().map_or(0, |t| t.positions());
        let config = Self {
            d_t: store.meta.d_t,
            d: store.meta.d,
            n_h,
            s,
            p: img.positions(),
            s_q: query.positions(),
            k,
            seed,
            loss_mode: LossMode::default(),
            ffn: false,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), AfsError> {
        let bad = |m: String| Err(AfsError::Config(m));
        if self.d_t == 0 || self.d == 0 || self.p == 0 || self.s_q == 0 {
            return bad(format!("dimensions must be positive: {self:?}"));
        }
        if self.n_h == 0 || self.d_t % self.n_h != 0 {
            return bad(format!("d_t={} is not divisible by n_h={}", self.d_t, self.n_h));
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_t / self.n_h
    }
}

/// Everything one forward pass produced that refinement needs.
#[derive(Debug, Clone)]
pub struct AfsInference {
    pub z_cls: Vec<f64>,
    /// Per head, `(1 + s_q) x s_r` attention weights.
    pub cross_attention: Vec<Tensor<f32>>,
    /// Validity of each query row (CLS first).
    pub query_rows: Vec<bool>,
    pub sequence: RelevanceSequence,
}

/// Trained parameters together with their configuration.
#[derive(Debug, Clone)]
pub struct AfsModel {
    pub config: AfsConfig,
    pub params: AfsParams<f32>,
}

impl AfsModel {
    pub fn new(config: AfsConfig, params: AfsParams<f32>) -> Result<Self, AfsError> {
        config.validate()?;
        params.check_layout(&config)?;
        Ok(Self { config, params })
    }

    pub fn init(config: AfsConfig) -> Result<Self, AfsError> {
        config.validate()?;
        let params = AfsParams::init(&config);
        Ok(Self { config, params })
    }

    /// Runs the model for the query stored at caption row `query_row` over
    /// the feedback items `items` (store indices, in rank order).
    pub fn infer(
        &self,
        store: &EmbeddingStore,
        query_row: usize,
        items: &[usize],
        with_captions: bool,
        key_bias: Option<&[f64]>,
    ) -> Result<AfsInference, AfsError> {
        let query = store.query_token_features.as_ref().ok_or(AfsError::MissingFeatures("query token features"))?;
        if query_row >= query.items() {
            return Err(AfsError::Input(format!("query row {query_row} outside 0..{}", query.items())));
        }
        let sequence = build_relevance_sequence(store, items, with_captions)?;
        let tokens = Tensor::new(query.positions(), query.dim(), query.item(query_row).to_vec());
        let query_mask = query.valid_mask(query_row);
        let bias32: Option<Vec<f32>> = key_bias.map(|b| b.iter().map(|&v| v as f32).collect());

        let mut tape = Tape::<f32>::new();
        let vars = self.params.bind(&mut tape, false);
        let out = forward(&mut tape, &vars, &self.config, &tokens, &query_mask, &sequence, bias32.as_deref())?;
        let mut query_rows = vec![true];
        query_rows.extend(query_mask);
        Ok(AfsInference {
            z_cls: tape.value(out.z_cls).to_f64_vec(),
            cross_attention: out.cross_scores.iter().map(|&v| tape.value(v).clone()).collect(),
            query_rows,
            sequence,
        })
    }

    /// One AFS refinement of `query` (the running query embedding) using the
    /// query tokens at `query_row` and the feedback `items`. The summary
    /// vector is rescaled to the query norm first, since the cosine objective
    /// leaves its length free.
    #[allow(clippy::too_many_arguments)]
    pub fn refine<A: Component>(
        &self,
        store: &EmbeddingStore,
        query: &[A],
        query_row: usize,
        items: &[usize],
        with_captions: bool,
        key_bias: Option<&[f64]>,
        params: &RocchioParams,
    ) -> Result<(RefinementBreakdown, AfsInference), AfsError> {
        let inf = self.infer(store, query_row, items, with_captions, key_bias)?;
        let scores = accumulate_item_scores(&inf.cross_attention, &inf.query_rows, &inf.sequence);
        let img: Vec<&[f32]> = items.iter().map(|&i| store.image_embedding(i)).collect();
        let cap: Vec<&[f32]> = items.iter().map(|&i| store.synthetic_caption_embedding(i)).collect();
        let q: Vec<f64> = query.iter().map(|v| v.widen()).collect();
        let zc = match_norm(&inf.z_cls, &q);
        let breakdown = refine_query_afs(&q, &zc, &img, with_captions.then_some(cap.as_slice()), &scores, params)?;
        Ok((breakdown, inf))
    }
}

/// `v` rescaled to the Euclidean norm of `reference`; a zero vector stays zero.
pub fn match_norm(v: &[f64], reference: &[f64]) -> Vec<f64> {
    let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = norm(v);
    if nv == 0.0 {
        return v.to_vec();
    }
    let scale = norm(reference) / nv;
    v.iter().map(|a| a * scale).collect()
}
