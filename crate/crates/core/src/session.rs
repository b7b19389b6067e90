//! Retrieval sessions: one query, a sequence of turns, and the feedback that
//! moves the query embedding between them.
//!
//! Turn 1 ranks with the initial query embedding. Every later turn first
//! refines the embedding from the items shown in the previous turn (top-K
//! under the session's strategy) and then ranks again.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::afs::{region_bias_vector, saliency, AfsError, AfsModel, ItemSaliency, Polarity, RegionBox};
use crate::ranker::{bottom_k, rank_of, score_all, top_from_scores, CandidateSet, RankError};
use crate::rocchio::{
    refine_extended, refine_grf, refine_original, refine_with_weights, FeedbackWeights, RefinementBreakdown,
    RocchioError, RocchioParams,
};
use crate::store::EmbeddingStore;

type Ranked = (CandidateSet, Option<usize>, Vec<f64>, Vec<f64>);

/// Smallest number of items shown per turn; metrics read the top 5.
pub const MIN_DISPLAY: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    None,
    PrfOriginal,
    PrfExtended,
    Grf,
    Afs,
    AfsPrf,
    Explicit,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::None,
        Strategy::PrfOriginal,
        Strategy::PrfExtended,
        Strategy::Grf,
        Strategy::Afs,
        Strategy::AfsPrf,
        Strategy::Explicit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::PrfOriginal => "prf_original",
            Strategy::PrfExtended => "prf_extended",
            Strategy::Grf => "grf",
            Strategy::Afs => "afs",
            Strategy::AfsPrf => "afs_prf",
            Strategy::Explicit => "explicit",
        }
    }

    pub fn needs_model(self) -> bool {
        matches!(self, Strategy::Afs | Strategy::AfsPrf)
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.replace('-', "_");
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == norm)
            .ok_or_else(|| format!("unknown strategy {s:?}; expected one of none, prf_original, prf_extended, grf, afs, afs_prf, explicit"))
    }
}

/// Which embedding later turns refine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    /// The embedding produced by the previous turn.
    #[default]
    Previous,
    /// Always the initial query embedding.
    Original,
}

/// How explicit feedback captions are folded into the query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplicitMode {
    /// Mean of the initial query and every feedback caption so far.
    #[default]
    Running,
    /// Mean of the current embedding and the newest caption.
    Pairwise,
}

macro_rules! from_str_enum {
    ($ty:ty, $($name:literal => $variant:expr),+) => {
        impl std::str::FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(format!("unknown value {other:?}; expected one of {}", [$($name),+].join(", "))),
                }
            }
        }
    };
}
from_str_enum!(Anchor, "previous" => Anchor::Previous, "original" => Anchor::Original);
from_str_enum!(ExplicitMode, "running" => ExplicitMode::Running, "pairwise" => ExplicitMode::Pairwise);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub strategy: Strategy,
    pub rocchio: RocchioParams,
    /// Items ranked and shown per turn.
    pub k_display: usize,
    pub anchor: Anchor,
    pub explicit_mode: ExplicitMode,
    /// Logit offset for user-marked image regions.
    pub region_bias: f64,
    /// Seeds the simulated explicit-feedback caption order.
    pub seed: u64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::None,
            rocchio: RocchioParams::default(),
            k_display: 10,
            anchor: Anchor::default(),
            explicit_mode: ExplicitMode::default(),
            region_bias: 1.0,
            seed: crate::DEFAULT_SEED,
        }
    }
}

impl SessionConfig {
    pub fn new(strategy: Strategy) -> Self {
        Self { strategy, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), SessionError> {
        self.rocchio.validate().map_err(|e| SessionError::InvalidParams(e.to_string()))?;
        if self.k_display < MIN_DISPLAY.max(self.rocchio.k) {
            return Err(SessionError::InvalidParams(format!(
                "k_display={} must be at least max({MIN_DISPLAY}, k={})",
                self.k_display, self.rocchio.k
            )));
        }
        if !(self.region_bias.is_finite() && self.region_bias >= 0.0) {
            return Err(SessionError::InvalidParams(format!("region_bias must be finite and >= 0, got {}", self.region_bias)));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("unknown query {0:?}")]
    UnknownQuery(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("strategy {strategy} unavailable: {reason}")]
    Unavailable { strategy: Strategy, reason: String },
    #[error("invalid feedback: {0}")]
    Feedback(String),
    #[error("explicit feedback pool exhausted after {0} captions")]
    PoolExhausted(usize),
    #[error(transparent)]
    Rank(#[from] RankError),
    #[error(transparent)]
    Rocchio(#[from] RocchioError),
    #[error(transparent)]
    Afs(#[from] AfsError),
}

/// Relevance mark on one shown item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemMark {
    pub item_id: String,
    pub polarity: Polarity,
}

/// Patches of one shown image marked by the user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionMark {
    pub item_id: String,
    pub patches: Vec<usize>,
    pub polarity: Polarity,
}

/// User input applied before a turn. Empty feedback gives the automatic
/// behaviour of the session's strategy.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Feedback {
    pub item_marks: Vec<ItemMark>,
    pub region_boxes: Vec<RegionMark>,
    pub explicit_caption_id: Option<String>,
}

impl Feedback {
    pub fn is_empty(&self) -> bool {
        self.item_marks.is_empty() && self.region_boxes.is_empty() && self.explicit_caption_id.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnResult {
    /// 1-based.
    pub turn: usize,
    pub candidates: CandidateSet,
    /// Embedding used for this turn's ranking.
    pub query_embedding: Vec<f64>,
    /// 1-based rank of the query's own item in the full ordering.
    pub gt_rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refinement: Option<RefinementBreakdown>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub saliency: Option<Vec<ItemSaliency>>,
}

/// Read-only inputs shared by all sessions.
#[derive(Clone, Copy)]
pub struct SessionContext<'a> {
    pub store: &'a EmbeddingStore,
    pub model: Option<&'a AfsModel>,
}

impl<'a> SessionContext<'a> {
    pub fn new(store: &'a EmbeddingStore, model: Option<&'a AfsModel>) -> Self {
        Self { store, model }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub config: SessionConfig,
    pub query_id: String,
    /// Caption row of the query.
    pub query_row: usize,
    /// Store index of the item the query caption belongs to.
    pub gt_item: Option<usize>,
    pub initial: Vec<f64>,
    pub current: Vec<f64>,
    pub turns: Vec<TurnResult>,
    /// Caption rows folded in by explicit feedback, in order.
    pub explicit_used: Vec<usize>,
    /// Simulated explicit-feedback caption rows not yet used.
    pub explicit_pool: Vec<usize>,
    /// Feedback applied before turns 2, 3, ...
    pub feedback: Vec<Feedback>,
}

/// Caption rows of the query's item other than the query itself, in a
/// seeded order that depends on the query.
pub fn simulate_explicit_pool(store: &EmbeddingStore, query_row: usize, seed: u64) -> Result<Vec<usize>, SessionError> {
    let cap = store.caption_row_ref(query_row).ok_or_else(|| SessionError::UnknownQuery(format!("caption row {query_row}")))?;
    let rec = &store.items[cap.item];
    if rec.human_captions.len() < 2 {
        return Err(SessionError::Unavailable {
            strategy: Strategy::Explicit,
            reason: format!("item {} has fewer than 2 captions", rec.item_id),
        });
    }
    let mut pool: Vec<usize> = rec.caption_rows().filter(|&r| r != query_row).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (query_row as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    pool.shuffle(&mut rng);
    Ok(pool)
}

/// Mean of `initial` and all `captions` ([`ExplicitMode::Running`]), or of
/// `current` and the last caption ([`ExplicitMode::Pairwise`]).
pub fn explicit_refine<R: AsRef<[f32]>>(initial: &[f64], current: &[f64], captions: &[R], mode: ExplicitMode) -> Vec<f64> {
    let Some(last) = captions.last() else {
        return current.to_vec();
    };
    match mode {
        ExplicitMode::Running => {
            let n = (captions.len() + 1) as f64;
            let mut sum = initial.to_vec();
            for c in captions {
                for (s, &v) in sum.iter_mut().zip(c.as_ref()) {
                    *s += v as f64;
                }
            }
            sum.iter().map(|s| s / n).collect()
        }
        ExplicitMode::Pairwise => current.iter().zip(last.as_ref()).map(|(&a, &b)| (a + b as f64) / 2.0).collect(),
    }
}

fn check_strategy(ctx: &SessionContext, config: &SessionConfig) -> Result<(), SessionError> {
    let unavailable = |reason: &str| Err(SessionError::Unavailable { strategy: config.strategy, reason: reason.into() });
    match config.strategy {
        Strategy::Afs | Strategy::AfsPrf => {
            let Some(model) = ctx.model else { return unavailable("no AFS checkpoint loaded") };
            if model.config.d != ctx.store.dim() || model.config.d_t != ctx.store.meta.d_t {
                return unavailable("checkpoint dimensions do not match the store");
            }
            if ctx.store.query_token_features.is_none() || ctx.store.image_token_features.is_none() {
                return unavailable("store has no token features");
            }
            if config.strategy == Strategy::Afs && ctx.store.synthetic_caption_token_features.is_none() {
                return unavailable("store has no synthetic caption token features");
            }
            Ok(())
        }
        _ => Ok(()),
    }
}

impl SessionState {
    /// A session for the stored caption `query_id`, before any turn.
    pub fn new(ctx: &SessionContext, query_id: &str, config: SessionConfig) -> Result<Self, SessionError> {
        config.validate()?;
        check_strategy(ctx, &config)?;
        let cap = ctx.store.caption(query_id).ok_or_else(|| SessionError::UnknownQuery(query_id.to_string()))?;
        let explicit_pool = if config.strategy == Strategy::Explicit {
            simulate_explicit_pool(ctx.store, cap.row, config.seed)?
        } else {
            Vec::new()
        };
        let initial: Vec<f64> = ctx.store.caption_embedding(cap.row).iter().map(|&v| v as f64).collect();
        Ok(Self {
            config,
            query_id: query_id.to_string(),
            query_row: cap.row,
            gt_item: Some(cap.item),
            current: initial.clone(),
            initial,
            turns: Vec::new(),
            explicit_used: Vec::new(),
            explicit_pool,
            feedback: Vec::new(),
        })
    }

    pub fn turn_index(&self) -> usize {
        self.turns.len()
    }

    pub fn last_turn(&self) -> Option<&TurnResult> {
        self.turns.last()
    }

    /// Candidates, ground-truth rank, full scores and the embedding used.
    fn rank_current(
        &self,
        ctx: &SessionContext,
        embedding: Vec<f64>,
    ) -> Result<Ranked, SessionError> {
        let scores = score_all(&embedding, ctx.store)?;
        let candidates = top_from_scores(ctx.store, &scores, self.config.k_display, &self.query_id);
        let gt_rank = self.gt_item.map(|g| rank_of(ctx.store, &scores, g));
        Ok((candidates, gt_rank, scores, embedding))
    }

    /// Runs the next turn with automatic feedback.
    pub fn run_turn(&mut self, ctx: &SessionContext) -> Result<&TurnResult, SessionError> {
        self.run_turn_with(ctx, &Feedback::default())
    }

    /// Runs the next turn, applying `feedback` on the previous turn's items.
    /// Feedback given before the first turn is rejected.
    pub fn run_turn_with(&mut self, ctx: &SessionContext, feedback: &Feedback) -> Result<&TurnResult, SessionError> {
        check_strategy(ctx, &self.config)?;
        let Some(prev) = self.turns.last() else {
            if !feedback.is_empty() {
                return Err(SessionError::Feedback("feedback requires a previous turn".into()));
            }
            let (candidates, gt_rank, _, embedding) = self.rank_current(ctx, self.current.clone())?;
            self.turns.push(TurnResult {
                turn: 1,
                candidates,
                query_embedding: embedding,
                gt_rank,
                refinement: None,
                saliency: None,
            });
            return Ok(self.turns.last().expect("just pushed"));
        };

        let shown = &prev.candidates;
        let marks = resolve_marks(ctx.store, shown, feedback)?;
        let k = self.config.rocchio.k.min(shown.len());
        let feedback_items: Vec<usize> = shown.candidates[..k].iter().map(|c| c.index).collect();
        let feedback_scores: Vec<f64> = shown.candidates[..k].iter().map(|c| c.score).collect();
        let base = match self.config.anchor {
            Anchor::Previous => self.current.clone(),
            Anchor::Original => self.initial.clone(),
        };
        let p = &self.config.rocchio;
        let store = ctx.store;
        let mut explicit_row = None;
        let mut sal = None;

        let refinement = match self.config.strategy {
            Strategy::None => None,
            Strategy::PrfExtended | Strategy::Grf if !marks.items.is_empty() => {
                let rows: Vec<&[f32]> = marks
                    .items
                    .iter()
                    .map(|&(i, _)| {
                        if self.config.strategy == Strategy::Grf {
                            store.synthetic_caption_embedding(i)
                        } else {
                            store.image_embedding(i)
                        }
                    })
                    .collect();
                Some(refine_with_weights(&base, &rows, marks.weights(), p)?)
            }
            Strategy::PrfExtended => {
                let rows: Vec<&[f32]> = feedback_items.iter().map(|&i| store.image_embedding(i)).collect();
                Some(refine_extended(&base, &rows, &feedback_scores, p)?)
            }
            Strategy::Grf => {
                let rows: Vec<&[f32]> = feedback_items.iter().map(|&i| store.synthetic_caption_embedding(i)).collect();
                Some(refine_grf(&base, &rows, &feedback_scores, p)?)
            }
            Strategy::PrfOriginal => {
                let (relevant, nonrelevant): (Vec<usize>, Vec<usize>) = if marks.items.is_empty() {
                    let scores = score_all(&self.current, store)?;
                    (feedback_items.clone(), bottom_k(store, &scores, k))
                } else {
                    marks.split()
                };
                let rel: Vec<&[f32]> = relevant.iter().map(|&i| store.image_embedding(i)).collect();
                let non: Vec<&[f32]> = nonrelevant.iter().map(|&i| store.image_embedding(i)).collect();
                Some(refine_original_partial(&base, &rel, &non, p)?)
            }
            Strategy::Afs | Strategy::AfsPrf => {
                let model = ctx.model.expect("checked above");
                let with_captions = self.config.strategy == Strategy::Afs;
                let boxes = region_boxes(store, &feedback_items, feedback)?;
                let seq_probe = crate::afs::build_relevance_sequence(store, &feedback_items, with_captions)?;
                let bias = if boxes.is_empty() {
                    None
                } else {
                    Some(region_bias_vector(&seq_probe, &boxes, self.config.region_bias)?)
                };
                let (breakdown, inf) =
                    model.refine(store, &base, self.query_row, &feedback_items, with_captions, bias.as_deref(), p)?;
                sal = Some(saliency(&inf.cross_attention, &inf.query_rows, &inf.sequence));
                Some(breakdown)
            }
            Strategy::Explicit => {
                let row = self.next_explicit_row(store, feedback, &marks)?;
                explicit_row = Some(row);
                let mut rows: Vec<&[f32]> = self.explicit_used.iter().map(|&r| store.caption_embedding(r)).collect();
                rows.push(store.caption_embedding(row));
                let refined = explicit_refine(&self.initial, &self.current, &rows, self.config.explicit_mode);
                Some(RefinementBreakdown {
                    refined_query: refined,
                    positive_vector: store.caption_embedding(row).iter().map(|&v| v as f64).collect(),
                    negative_vector: Vec::new(),
                    positive_weights: Vec::new(),
                    negative_weights: Vec::new(),
                })
            }
        };

        let embedding = refinement.as_ref().map_or_else(|| self.current.clone(), |r| r.refined_query.clone());
        if embedding.iter().any(|v| !v.is_finite()) {
            return Err(SessionError::InvalidParams("refinement produced a non-finite embedding".into()));
        }
        let (candidates, gt_rank, _, embedding) = self.rank_current(ctx, embedding)?;
        if let Some(row) = explicit_row {
            self.explicit_used.push(row);
            self.explicit_pool.retain(|&r| r != row);
        }
        self.current = embedding.clone();
        self.feedback.push(feedback.clone());
        let turn = self.turns.len() + 1;
        self.turns.push(TurnResult { turn, candidates, query_embedding: embedding, gt_rank, refinement, saliency: sal });
        Ok(self.turns.last().expect("just pushed"))
    }

    fn next_explicit_row(&self, store: &EmbeddingStore, feedback: &Feedback, marks: &Marks) -> Result<usize, SessionError> {
        if let Some(id) = &feedback.explicit_caption_id {
            let cap = store.caption(id).ok_or_else(|| SessionError::Feedback(format!("unknown caption {id:?}")))?;
            if cap.row == self.query_row || self.explicit_used.contains(&cap.row) {
                return Err(SessionError::Feedback(format!("caption {id:?} was already used")));
            }
            return Ok(cap.row);
        }
        if let Some(&(item, _)) = marks.items.iter().find(|(_, w)| *w == Polarity::Relevant) {
            if Some(item) != self.gt_item {
                // The user pointed at another item: its next unused caption
                // serves as the new description.
                return store.items[item]
                    .caption_rows()
                    .find(|r| *r != self.query_row && !self.explicit_used.contains(r))
                    .ok_or(SessionError::PoolExhausted(self.explicit_used.len()));
            }
        }
        self.explicit_pool.first().copied().ok_or(SessionError::PoolExhausted(self.explicit_used.len()))
    }

    /// `turns` consecutive turns with automatic feedback.
    pub fn run_multi_turn(&mut self, ctx: &SessionContext, turns: usize) -> Result<Vec<TurnResult>, SessionError> {
        if turns == 0 {
            return Err(SessionError::InvalidParams("turns must be at least 1".into()));
        }
        let start = self.turns.len();
        for _ in 0..turns {
            self.run_turn(ctx)?;
        }
        Ok(self.turns[start..].to_vec())
    }

    /// Re-runs a recorded session from scratch with its recorded feedback.
    pub fn replay(ctx: &SessionContext, recorded: &SessionState) -> Result<SessionState, SessionError> {
        let mut s = SessionState::new(ctx, &recorded.query_id, recorded.config.clone())?;
        if !recorded.turns.is_empty() {
            s.run_turn(ctx)?;
        }
        for fb in &recorded.feedback {
            s.run_turn_with(ctx, fb)?;
        }
        Ok(s)
    }
}

/// Classical rule where either side may be empty: an empty side contributes
/// nothing.
fn refine_original_partial(
    base: &[f64],
    relevant: &[&[f32]],
    nonrelevant: &[&[f32]],
    p: &RocchioParams,
) -> Result<RefinementBreakdown, RocchioError> {
    match (relevant.is_empty(), nonrelevant.is_empty()) {
        (false, false) => refine_original(base, relevant, nonrelevant, p),
        (false, true) => {
            let mut r = refine_original(base, relevant, relevant, &RocchioParams { gamma: 0.0, ..*p })?;
            r.negative_vector = vec![0.0; base.len()];
            r.negative_weights.clear();
            Ok(r)
        }
        (true, false) => {
            let mut r = refine_original(base, nonrelevant, nonrelevant, &RocchioParams { beta: 0.0, ..*p })?;
            r.positive_vector = vec![0.0; base.len()];
            r.positive_weights.clear();
            Ok(r)
        }
        (true, true) => Err(RocchioError::Empty),
    }
}

struct Marks {
    /// Store index and polarity, first mark per item wins.
    items: Vec<(usize, Polarity)>,
}

impl Marks {
    fn split(&self) -> (Vec<usize>, Vec<usize>) {
        let rel = self.items.iter().filter(|(_, p)| *p == Polarity::Relevant).map(|(i, _)| *i).collect();
        let irr = self.items.iter().filter(|(_, p)| *p == Polarity::Irrelevant).map(|(i, _)| *i).collect();
        (rel, irr)
    }

    /// Uniform weights within each marked group; the other group gets zero.
    fn weights(&self) -> FeedbackWeights {
        let n_rel = self.items.iter().filter(|(_, p)| *p == Polarity::Relevant).count();
        let n_irr = self.items.len() - n_rel;
        let mut positive = Vec::with_capacity(self.items.len());
        let mut negative = Vec::with_capacity(self.items.len());
        for (_, p) in &self.items {
            match p {
                Polarity::Relevant => {
                    positive.push(1.0 / n_rel as f64);
                    negative.push(0.0);
                }
                Polarity::Irrelevant => {
                    positive.push(0.0);
                    negative.push(1.0 / n_irr as f64);
                }
            }
        }
        FeedbackWeights { positive, negative }
    }
}

fn resolve_marks(store: &EmbeddingStore, shown: &CandidateSet, feedback: &Feedback) -> Result<Marks, SessionError> {
    let mut items: Vec<(usize, Polarity)> = Vec::new();
    for m in &feedback.item_marks {
        let idx = shown_index(store, shown, &m.item_id)?;
        if !items.iter().any(|(i, _)| *i == idx) {
            items.push((idx, m.polarity));
        }
    }
    for b in &feedback.region_boxes {
        shown_index(store, shown, &b.item_id)?;
    }
    Ok(Marks { items })
}

fn shown_index(store: &EmbeddingStore, shown: &CandidateSet, item_id: &str) -> Result<usize, SessionError> {
    let idx = store.item_index(item_id).ok_or_else(|| SessionError::Feedback(format!("unknown item {item_id:?}")))?;
    if shown.position(idx).is_none() {
        return Err(SessionError::Feedback(format!("item {item_id:?} was not shown in the previous turn")));
    }
    Ok(idx)
}

/// Region marks as boxes over the feedback list. Patch indices are checked
/// for every mark; marks on shown items outside the feedback list are
/// dropped.
fn region_boxes(store: &EmbeddingStore, feedback_items: &[usize], feedback: &Feedback) -> Result<Vec<RegionBox>, SessionError> {
    let p = store.image_token_features.as_ref().map_or(0, |t| t.positions());
    let mut boxes = Vec::new();
    for m in &feedback.region_boxes {
        if let Some(&bad) = m.patches.iter().find(|&&x| x >= p) {
            return Err(SessionError::Afs(AfsError::PatchOutOfRange { item: 0, patch: bad, p }));
        }
        let idx = store.item_index(&m.item_id).ok_or_else(|| SessionError::Feedback(format!("unknown item {:?}", m.item_id)))?;
        match feedback_items.iter().position(|&i| i == idx) {
            Some(pos) => boxes.push(RegionBox { item: pos, patches: m.patches.clone(), polarity: m.polarity }),
            None => log::debug!("region mark on {} ignored: outside the feedback items", m.item_id),
        }
    }
    Ok(boxes)
}
