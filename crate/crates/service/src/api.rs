//! Request and response bodies.

use refrank_core::afs::ItemSaliency;
use refrank_core::session::{Anchor, ExplicitMode, Feedback, SessionConfig, Strategy, TurnResult};
use refrank_core::store::{Caption, EmbeddingStore, ItemRecord};
use serde::{Deserialize, Serialize};

/// Optional overrides on top of the strategy defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionParams {
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub tau: Option<f64>,
    pub k: Option<usize>,
    pub k_display: Option<usize>,
    pub anchor: Option<Anchor>,
    pub explicit_mode: Option<ExplicitMode>,
    pub region_bias: Option<f64>,
    pub seed: Option<u64>,
}

impl SessionParams {
    pub fn apply(&self, strategy: Strategy) -> SessionConfig {
        let mut c = SessionConfig::new(strategy);
        let r = &mut c.rocchio;
        r.alpha = self.alpha.unwrap_or(r.alpha);
        r.beta = self.beta.unwrap_or(r.beta);
        r.gamma = self.gamma.unwrap_or(r.gamma);
        r.tau = self.tau.unwrap_or(r.tau);
        r.k = self.k.unwrap_or(r.k);
        // An explicit k larger than the display depth widens the display.
        c.k_display = self.k_display.unwrap_or(c.k_display.max(c.rocchio.k));
        c.anchor = self.anchor.unwrap_or(c.anchor);
        c.explicit_mode = self.explicit_mode.unwrap_or(c.explicit_mode);
        c.region_bias = self.region_bias.unwrap_or(c.region_bias);
        c.seed = self.seed.unwrap_or(c.seed);
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    #[serde(default)]
    pub query_id: Option<String>,
    /// Alias of `query_id`.
    #[serde(default)]
    pub caption_id: Option<String>,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default)]
    pub params: SessionParams,
}

fn default_strategy() -> Strategy {
    Strategy::None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultView {
    /// 1-based.
    pub rank: usize,
    pub item_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyView {
    pub item_id: String,
    pub patches: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<f64>>,
    pub image_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption_score: Option<f64>,
}

impl SaliencyView {
    pub fn new(store: &EmbeddingStore, s: &ItemSaliency) -> Self {
        Self {
            item_id: store.items[s.item].item_id.clone(),
            patches: s.patches.clone(),
            tokens: s.tokens.clone(),
            image_score: s.image_score,
            caption_score: s.caption_score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnView {
    pub turn: usize,
    pub results: Vec<ResultView>,
    pub gt_rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub saliency: Option<Vec<SaliencyView>>,
}

impl TurnView {
    pub fn new(store: &EmbeddingStore, strategy: Strategy, t: &TurnResult) -> Self {
        let with_saliency = matches!(strategy, Strategy::Afs | Strategy::AfsPrf);
        Self {
            turn: t.turn,
            results: t
                .candidates
                .candidates
                .iter()
                .enumerate()
                .map(|(i, c)| ResultView { rank: i + 1, item_id: c.item_id.clone(), score: c.score })
                .collect(),
            gt_rank: t.gt_rank,
            saliency: t
                .saliency
                .as_ref()
                .filter(|_| with_saliency)
                .map(|v| v.iter().map(|s| SaliencyView::new(store, s)).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnResponse {
    pub session_id: String,
    #[serde(flatten)]
    pub turn: TurnView,
}

/// Everything needed to replay a session offline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionHistory {
    pub session_id: String,
    pub query_id: String,
    pub config: SessionConfig,
    pub created_at_ms: u64,
    pub updated_at_ms: u64,
    /// Feedback applied before turns 2, 3, ...
    pub feedback: Vec<Feedback>,
    pub turns: Vec<TurnView>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemView {
    pub item_id: String,
    pub image_ref: String,
    pub human_captions: Vec<Caption>,
    pub synthetic_caption: String,
}

impl From<&ItemRecord> for ItemView {
    fn from(r: &ItemRecord) -> Self {
        Self {
            item_id: r.item_id.clone(),
            image_ref: r.image_ref.clone(),
            human_captions: r.human_captions.clone(),
            synthetic_caption: r.synthetic_caption.clone(),
        }
    }
}
