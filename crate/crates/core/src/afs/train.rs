use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::forward::batch_objective;
use super::params::{AfsParams, BoundParams};
use super::{AfsConfig, AfsError};
use crate::ranker::rank;
use crate::store::EmbeddingStore;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Share of items held out for validation.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            epochs: 100,
            patience: 10,
            lr: 3e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: crate::DEFAULT_SEED,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), AfsError> {
        let bad = |m: &str| Err(AfsError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) || !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("learning rate and weight decay must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return bad("moment decay rates must lie in [0, 1) and eps must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        Ok(())
    }

    /// Cosine-annealed learning rate for 0-based epoch `e`.
    pub fn lr_at(&self, e: usize) -> f64 {
        self.lr * 0.5 * (1.0 + (std::f64::consts::PI * e as f64 / self.epochs as f64).cos())
    }
}

/// One query with its feedback items and supervision targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    /// Caption row used as the query.
    pub query_row: usize,
    /// Store index of the ground-truth item.
    pub item: usize,
    /// Store indices of the top-K items retrieved for the query.
    pub feedback: Vec<usize>,
    pub target_img: Vec<f32>,
    /// Mean embedding of the item's other captions.
    pub target_cap: Option<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean per-query loss over the epoch's training batches.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn first_train_loss(&self) -> Option<f64> {
        self.epochs.first().map(|e| e.train_loss)
    }

    pub fn last_train_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }
}

/// Builds examples for `(item, caption_row)` queries: the top-K retrieved
/// items for the caption, the item's image, and the mean of its remaining
/// captions.
pub fn prepare_examples(
    store: &EmbeddingStore,
    config: &AfsConfig,
    queries: &[(usize, usize)],
) -> Result<Vec<TrainExample>, AfsError> {
    let d = store.dim();
    queries
        .iter()
        .map(|&(item, row)| {
            let rec = store.items.get(item).ok_or_else(|| AfsError::Input(format!("item {item} outside store")))?;
            let rows = rec.caption_rows();
            if !rows.contains(&row) {
                return Err(AfsError::Input(format!("caption row {row} does not belong to item {}", rec.item_id)));
            }
            let query: Vec<f64> = store.caption_embedding(row).iter().map(|&v| v as f64).collect();
            let feedback = rank(&query, store, config.k, &rec.item_id)
                .map_err(|e| AfsError::Input(e.to_string()))?
                .indices();
            let others: Vec<usize> = rows.filter(|&r| r != row).collect();
            let target_cap = (!others.is_empty()).then(|| {
                let mut mean = vec![0.0f64; d];
                for &r in &others {
                    for (m, &v) in mean.iter_mut().zip(store.caption_embedding(r)) {
                        *m += v as f64;
                    }
                }
                mean.iter().map(|m| (m / others.len() as f64) as f32).collect()
            });
            Ok(TrainExample {
                query_row: row,
                item,
                feedback,
                target_img: store.image_embedding(item).to_vec(),
                target_cap,
            })
        })
        .collect()
}

fn check_store(store: &EmbeddingStore, config: &AfsConfig) -> Result<(), AfsError> {
    config.validate()?;
    if store.query_token_features.is_none() {
        return Err(AfsError::MissingFeatures("query token features"));
    }
    if store.image_token_features.is_none() {
        return Err(AfsError::MissingFeatures("image token features"));
    }
    if config.s > 0 && store.synthetic_caption_token_features.is_none() {
        return Err(AfsError::MissingFeatures("synthetic caption token features"));
    }
    if store.dim() != config.d || store.meta.d_t != config.d_t {
        return Err(AfsError::Config(format!(
            "store has d={}, d_t={} but the model expects d={}, d_t={}",
            store.dim(),
            store.meta.d_t,
            config.d,
            config.d_t
        )));
    }
    if let Some(rec) = store.items.iter().find(|r| r.human_captions.len() < 2) {
        return Err(AfsError::Input(format!(
            "training needs at least 2 captions per item; {} has {}",
            rec.item_id,
            rec.human_captions.len()
        )));
    }
    Ok(())
}

/// Trains a freshly initialised model on `store`.
///
/// Items are split into train and validation parts with the training seed.
/// Each epoch samples one caption per training item as the query; the
/// validation queries always use each item's first caption.
pub fn train(
    store: &EmbeddingStore,
    config: &AfsConfig,
    train_config: &TrainConfig,
) -> Result<(AfsParams<f32>, TrainHistory), AfsError> {
    check_store(store, config)?;
    train_config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed);
    let mut order: Vec<usize> = (0..store.len()).collect();
    order.shuffle(&mut rng);
    let mut n_val = (train_config.val_fraction * store.len() as f64).round() as usize;
    if train_config.val_fraction > 0.0 && store.len() >= 2 {
        n_val = n_val.clamp(1, store.len() - 1);
    }
    let (val_items, train_items) = order.split_at(n_val);
    let mut train_items = train_items.to_vec();
    train_items.sort_unstable();
    let val_queries: Vec<(usize, usize)> =
        val_items.iter().map(|&i| (i, store.items[i].caption_start)).collect();
    let val = prepare_examples(store, config, &val_queries)?;
    train_examples(store, config, train_config, &train_items, &val, AfsParams::init(config))
}

/// Loss and parameter gradients of one example, on its own tape.
fn example_grad(
    store: &EmbeddingStore,
    config: &AfsConfig,
    params: &AfsParams<f32>,
    ex: &TrainExample,
) -> Result<(f64, Vec<Tensor<f32>>), AfsError> {
    let mut tape = Tape::<f32>::new();
    let bound = params.bind(&mut tape, true);
    let loss = batch_objective(&mut tape, &bound, config, store, std::slice::from_ref(ex))?;
    let value = tape.value(loss).item() as f64;
    let grads = tape.backward(loss)?;
    let g = bound
        .vars()
        .zip(params.entries())
        .map(|(v, (_, t))| grads.get_or_zeros(v, t.shape()))
        .collect();
    Ok((value, g))
}

fn example_loss(store: &EmbeddingStore, config: &AfsConfig, params: &AfsParams<f32>, ex: &TrainExample) -> Result<f64, AfsError> {
    let mut tape = Tape::<f32>::new();
    let bound: BoundParams = params.bind(&mut tape, false);
    let loss = batch_objective(&mut tape, &bound, config, store, std::slice::from_ref(ex))?;
    Ok(tape.value(loss).item() as f64)
}

struct AdamW {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl AdamW {
    fn new(params: &AfsParams<f32>) -> Self {
        let zeros: Vec<Vec<f32>> = params.entries().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    fn step(&mut self, params: &mut AfsParams<f32>, grads: &[Tensor<f32>], lr: f64, tc: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - tc.beta1.powi(self.t);
        let bc2 = 1.0 - tc.beta2.powi(self.t);
        let (b1, b2) = (tc.beta1 as f32, tc.beta2 as f32);
        let decay = (1.0 - lr * tc.weight_decay) as f32;
        for (((_, p), g), (m, v)) in params.entries_mut().iter_mut().zip(grads).zip(self.m.iter_mut().zip(&mut self.v)) {
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m as f64 / bc1;
                let v_hat = *v as f64 / bc2;
                *w = *w * decay - (lr * m_hat / (v_hat.sqrt() + tc.eps)) as f32;
            }
        }
    }
}

/// Training loop over `train_items` starting from `init`; validation loss
/// is the mean per-query objective on `val` (training loss when `val` is
/// empty). Returns the parameters of the best validation epoch.
pub fn train_examples(
    store: &EmbeddingStore,
    config: &AfsConfig,
    tc: &TrainConfig,
    train_items: &[usize],
    val: &[TrainExample],
    init: AfsParams<f32>,
) -> Result<(AfsParams<f32>, TrainHistory), AfsError> {
    check_store(store, config)?;
    tc.validate()?;
    init.check_layout(config)?;
    if train_items.is_empty() {
        return Err(AfsError::Input("no training items".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5eed_0af5);
    let mut params = init;
    let mut opt = AdamW::new(&params);
    let mut best = (f64::INFINITY, params.clone(), 0usize);
    let mut history = TrainHistory::default();
    let mut since_best = 0usize;
    let mut order = train_items.to_vec();

    for e in 0..tc.epochs {
        let lr = tc.lr_at(e);
        order.shuffle(&mut rng);
        let queries: Vec<(usize, usize)> = order
            .iter()
            .map(|&i| {
                let rows = store.items[i].caption_rows();
                (i, rng.random_range(rows))
            })
            .collect();
        let examples = prepare_examples(store, config, &queries)?;

        let mut total = 0.0;
        for batch in examples.chunks(tc.batch_size) {
            let per_example: Vec<(f64, Vec<Tensor<f32>>)> =
                batch.par_iter().map(|ex| example_grad(store, config, &params, ex)).collect::<Result<_, _>>()?;
            let mut iter = per_example.into_iter();
            let (first_loss, mut grads) = iter.next().expect("non-empty batch");
            total += first_loss;
            for (loss, g) in iter {
                total += loss;
                for (acc, gi) in grads.iter_mut().zip(&g) {
                    acc.add_assign(gi);
                }
            }
            opt.step(&mut params, &grads, lr, tc);
        }
        let train_loss = total / examples.len() as f64;
        if !train_loss.is_finite() {
            return Err(AfsError::Input(format!("training diverged at epoch {}", e + 1)));
        }

        let val_loss = if val.is_empty() {
            None
        } else {
            let losses: Vec<f64> =
                val.par_iter().map(|ex| example_loss(store, config, &params, ex)).collect::<Result<_, _>>()?;
            Some(losses.iter().sum::<f64>() / losses.len() as f64)
        };
        history.epochs.push(EpochRecord { epoch: e + 1, train_loss, val_loss, lr });
        log::debug!("epoch {} lr {lr:.3e} train {train_loss:.5} val {val_loss:?}", e + 1);

        let score = val_loss.unwrap_or(train_loss);
        if score < best.0 {
            best = (score, params.clone(), e + 1);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= tc.patience {
                history.stopped_early = e + 1 < tc.epochs;
                break;
            }
        }
    }
    history.best_epoch = best.2;
    Ok((best.1, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::afs::LossMode;
    use crate::store::testutil::tiny_store;

    fn config(store: &EmbeddingStore) -> AfsConfig {
        AfsConfig::for_store(store, 2, 2, 3).unwrap()
    }

    #[test]
    fn schedule_anneals_to_zero() {
        let tc = TrainConfig { epochs: 4, ..Default::default() };
        assert_eq!(tc.lr_at(0), 3e-4);
        assert!((tc.lr_at(2) - 1.5e-4).abs() < 1e-18);
        assert!(tc.lr_at(3) > 0.0 && tc.lr_at(3) < tc.lr_at(2));
        assert!(tc.lr_at(4).abs() < 1e-18);
    }

    #[test]
    fn examples_hold_out_the_query_caption() {
        let store = tiny_store();
        let ex = prepare_examples(&store, &config(&store), &[(1, 3)]).unwrap();
        assert_eq!(ex[0].target_cap.as_deref().unwrap(), store.caption_embedding(2));
        assert_eq!(ex[0].target_img, store.image_embedding(1));
        assert_eq!(ex[0].feedback.len(), 2);
        assert_eq!(ex[0].feedback[0], 1);
        assert!(prepare_examples(&store, &config(&store), &[(0, 3)]).is_err());
    }

    #[test]
    fn zero_lr_plateaus_and_stops_early() {
        let store = tiny_store();
        let tc = TrainConfig { lr: 0.0, epochs: 40, patience: 10, val_fraction: 0.34, ..Default::default() };
        let (params, hist) = train(&store, &config(&store), &tc).unwrap();
        assert!(hist.stopped_early);
        assert_eq!(hist.epochs.len(), 11);
        assert_eq!(hist.best_epoch, 1);
        assert_eq!(params, AfsParams::init(&config(&store)));
    }

    #[test]
    fn same_seed_same_curve() {
        let store = tiny_store();
        let tc = TrainConfig { epochs: 5, batch_size: 2, lr: 1e-2, val_fraction: 0.34, ..Default::default() };
        let mut cfg = config(&store);
        cfg.loss_mode = LossMode::ImageOnly;
        let (pa, ha) = train(&store, &cfg, &tc).unwrap();
        let (pb, hb) = train(&store, &cfg, &tc).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(pa, pb);
        let first = ha.first_train_loss().unwrap();
        assert!(first > 0.0 && first <= 2.0);
    }

    #[test]
    fn single_caption_items_rejected() {
        let mut parts = tiny_store().into_parts();
        parts.items[0].human_captions.truncate(1);
        let store = EmbeddingStore::from_parts(parts);
        assert!(train(&store, &config(&store), &TrainConfig::default()).is_err());
    }
}
