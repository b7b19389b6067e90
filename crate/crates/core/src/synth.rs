//! Seeded synthetic stores with a known ground truth.
//!
//! Every item has a latent concept. Concepts are grouped around cluster
//! centres on the unit sphere, so retrieval neighbourhoods contain related
//! items. Each view of an item (its image, each human caption, the
//! synthetic caption) is the normalised concept plus its own Gaussian noise,
//! shifted by a fixed modality offset: `m_img` for images and `m_txt` for
//! text, with `m_img` orthogonal to `m_txt`.
//!
//! Token features come from the same noisy view through a fixed random map
//! into `d_t`: every position carries the projected view scaled by a random
//! salience in `[0, 1]`, plus position noise. Caption and query token
//! sequences have random lengths and are padded with masked positions.
//!
//! The shared world (cluster centres, offsets, projection) depends only on
//! the seed; items are drawn from a stream that also depends on the split,
//! so `Train` and `Eval` stores share a world but not items.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::{
    validate_store, Caption, EmbeddingMatrix, EmbeddingStore, ItemRecord, StoreMeta, StoreParts, TokenFeatureTensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthSplit {
    #[default]
    Eval,
    Train,
}

impl SynthSplit {
    pub fn name(self) -> &'static str {
        match self {
            SynthSplit::Eval => "eval",
            SynthSplit::Train => "train",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_items: usize,
    pub d: usize,
    pub d_t: usize,
    /// Patches per image.
    pub p: usize,
    /// Synthetic caption tokens (padded length).
    pub s: usize,
    /// Query tokens (padded length).
    pub s_q: usize,
    pub captions_per_item: usize,
    pub sigma_image: f64,
    pub sigma_caption: f64,
    /// Length of the modality offsets.
    pub gap: f64,
    /// `0` draws every concept uniformly on the sphere.
    pub n_clusters: usize,
    pub cluster_spread: f64,
    pub token_noise: f64,
    pub seed: u64,
    pub split: SynthSplit,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_items: 500,
            d: 32,
            d_t: 16,
            p: 9,
            s: 12,
            s_q: 12,
            captions_per_item: 5,
            sigma_image: 0.3,
            sigma_caption: 0.4,
            gap: 0.25,
            n_clusters: 50,
            cluster_spread: 0.3,
            token_noise: 0.5,
            seed: crate::DEFAULT_SEED,
            split: SynthSplit::Eval,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    Config(String),
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        if self.n_items == 0 || self.d < 2 || self.d_t == 0 || self.p == 0 || self.s == 0 || self.s_q == 0 {
            return bad("n_items, d_t, p, s and s_q must be positive and d at least 2".into());
        }
        if !(1..=crate::store::MAX_CAPTIONS_PER_ITEM).contains(&self.captions_per_item) {
            return bad(format!("captions_per_item must be in 1..={}", crate::store::MAX_CAPTIONS_PER_ITEM));
        }
        for (name, v) in [
            ("sigma_image", self.sigma_image),
            ("sigma_caption", self.sigma_caption),
            ("gap", self.gap),
            ("cluster_spread", self.cluster_spread),
            ("token_noise", self.token_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)).collect()
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn add(a: &[f64], b: &[f64], scale: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + scale * y).collect()
}

struct World {
    centres: Vec<Vec<f64>>,
    m_img: Vec<f64>,
    m_txt: Vec<f64>,
    /// `d_t x d`, row-major.
    projection: Vec<f64>,
}

impl World {
    fn new(config: &SynthConfig) -> Self {
        let d = config.d;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let centres = (0..config.n_clusters).map(|_| normalize(gaussian(&mut rng, d, 1.0))).collect();
        let a = normalize(gaussian(&mut rng, d, 1.0));
        let b = gaussian(&mut rng, d, 1.0);
        let proj: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let m_txt = normalize(add(&b, &a, -proj));
        let projection = gaussian(&mut rng, config.d_t * d, 1.0 / (d as f64).sqrt());
        Self { centres, m_img: a, m_txt, projection }
    }

    fn project(&self, v: &[f64]) -> Vec<f64> {
        let d = v.len();
        normalize(self.projection.chunks(d).map(|row| row.iter().zip(v).map(|(p, x)| p * x).sum()).collect())
    }
}

/// A noisy view of `concept` before the modality offset.
fn view(rng: &mut ChaCha8Rng, concept: &[f64], sigma: f64) -> Vec<f64> {
    let d = concept.len();
    normalize(add(concept, &gaussian(rng, d, 1.0 / (d as f64).sqrt()), sigma))
}

fn to_f32(v: &[f64]) -> impl Iterator<Item = f32> + '_ {
    v.iter().map(|&x| x as f32)
}

/// Appends `positions` token rows for `view` and their mask, `valid` of
/// which are unmasked.
#[allow(clippy::too_many_arguments)]
fn tokens(
    rng: &mut ChaCha8Rng,
    world: &World,
    view: &[f64],
    positions: usize,
    valid: usize,
    noise: f64,
    values: &mut Vec<f32>,
    mask: &mut Vec<u8>,
) {
    let u = world.project(view);
    let d_t = u.len();
    for j in 0..positions {
        if j < valid {
            let salience: f64 = rng.random_range(0.0..1.0);
            let eps = gaussian(rng, d_t, noise / (d_t as f64).sqrt());
            values.extend(u.iter().zip(&eps).map(|(x, e)| (salience * x + e) as f32));
            mask.push(1);
        } else {
            values.extend(std::iter::repeat_n(0.0f32, d_t));
            mask.push(0);
        }
    }
}

/// Generates a store; the result always passes [`validate_store`].
pub fn generate(config: &SynthConfig) -> Result<EmbeddingStore, SynthError> {
    config.validate()?;
    let (n, d, d_t, c) = (config.n_items, config.d, config.d_t, config.captions_per_item);
    let world = World::new(config);
    let split_tag: u64 = match config.split {
        SynthSplit::Eval => 1,
        SynthSplit::Train => 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ split_tag.wrapping_mul(0x9E37_79B9_7F4A_7C15));

    let mut images = Vec::with_capacity(n * d);
    let mut captions = Vec::with_capacity(n * c * d);
    let mut synthetic = Vec::with_capacity(n * d);
    let (mut img_tok, mut img_mask) = (Vec::new(), Vec::new());
    let (mut syn_tok, mut syn_mask) = (Vec::new(), Vec::new());
    let (mut q_tok, mut q_mask) = (Vec::new(), Vec::new());
    let mut items = Vec::with_capacity(n);

    for i in 0..n {
        let cluster = if config.n_clusters > 0 { Some(i % config.n_clusters) } else { None };
        let concept = match cluster {
            Some(k) => view(&mut rng, &world.centres[k], config.cluster_spread),
            None => normalize(gaussian(&mut rng, d, 1.0)),
        };

        let v_img = view(&mut rng, &concept, config.sigma_image);
        images.extend(to_f32(&add(&v_img, &world.m_img, config.gap)));
        tokens(&mut rng, &world, &v_img, config.p, config.p, config.token_noise, &mut img_tok, &mut img_mask);

        let mut human = Vec::with_capacity(c);
        for j in 0..c {
            let v_cap = view(&mut rng, &concept, config.sigma_caption);
            captions.extend(to_f32(&add(&v_cap, &world.m_txt, config.gap)));
            let len = rng.random_range(config.s_q.div_ceil(2)..=config.s_q);
            tokens(&mut rng, &world, &v_cap, config.s_q, len, config.token_noise, &mut q_tok, &mut q_mask);
            human.push(Caption {
                caption_id: format!("q{i:05}_{j}"),
                text: format!("caption {j} of item {i}"),
            });
        }

        let v_syn = view(&mut rng, &concept, config.sigma_caption);
        synthetic.extend(to_f32(&add(&v_syn, &world.m_txt, config.gap)));
        let len = rng.random_range(config.s.div_ceil(2)..=config.s);
        tokens(&mut rng, &world, &v_syn, config.s, len, config.token_noise, &mut syn_tok, &mut syn_mask);

        items.push(ItemRecord {
            item_id: format!("img{i:05}"),
            image_ref: format!("synthetic/{}/img{i:05}.png", config.split.name()),
            human_captions: human,
            synthetic_caption: match cluster {
                Some(k) => format!("generated description of item {i} (cluster {k})"),
                None => format!("generated description of item {i}"),
            },
            image_row: i,
            caption_start: i * c,
            synthetic_caption_row: i,
        });
    }

    let store = EmbeddingStore::from_parts(StoreParts {
        meta: StoreMeta { backbone: "synthetic".into(), split: config.split.name().into(), d, d_t },
        image_embeddings: EmbeddingMatrix::new(n, d, images),
        caption_embeddings: EmbeddingMatrix::new(n * c, d, captions),
        synthetic_caption_embeddings: EmbeddingMatrix::new(n, d, synthetic),
        image_token_features: Some(TokenFeatureTensor::new(n, config.p, d_t, img_tok, img_mask)),
        synthetic_caption_token_features: Some(TokenFeatureTensor::new(n, config.s, d_t, syn_tok, syn_mask)),
        query_token_features: Some(TokenFeatureTensor::new(n * c, config.s_q, d_t, q_tok, q_mask)),
        image_multivector: None,
        items,
    });
    debug_assert!(validate_store(&store).is_valid());
    Ok(store)
}

/// Full-pipeline metrics of `strategy` over the store's query set.
pub fn oracle_metrics(
    store: &EmbeddingStore,
    strategy: crate::session::Strategy,
    params: &crate::rocchio::RocchioParams,
    turns: usize,
    model: Option<&crate::afs::AfsModel>,
) -> Result<crate::ranker::MetricsReport, crate::eval::EvalError> {
    let ctx = crate::session::SessionContext::new(store, model);
    let mut config = crate::eval::EvalConfig::new(strategy, turns);
    config.session.rocchio = *params;
    config.session.k_display = config.session.k_display.max(params.k);
    crate::eval::evaluate(&ctx, &config).map(|(report, _)| report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rocchio::RocchioParams;
    use crate::session::Strategy;

    fn small() -> SynthConfig {
        SynthConfig { n_items: 60, ..Default::default() }
    }

    #[test]
    fn deterministic_and_valid() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.image_embeddings, b.image_embeddings);
        assert_eq!(a.query_token_features, b.query_token_features);
        assert_eq!(a.items, b.items);
        let report = validate_store(&a);
        assert!(report.is_valid(), "{report}");
        let c = generate(&SynthConfig { seed: 7, ..small() }).unwrap();
        assert_ne!(a.image_embeddings, c.image_embeddings);
    }

    #[test]
    fn splits_share_world_not_items() {
        let eval = generate(&small()).unwrap();
        let train = generate(&SynthConfig { split: SynthSplit::Train, ..small() }).unwrap();
        assert_ne!(eval.image_embeddings, train.image_embeddings);
        assert_eq!(train.meta.split, "train");
    }

    #[test]
    fn offsets_are_orthogonal_unit_vectors() {
        let w = World::new(&SynthConfig::default());
        let dot: f64 = w.m_img.iter().zip(&w.m_txt).map(|(a, b)| a * b).sum();
        assert!(dot.abs() < 1e-12);
        for m in [&w.m_img, &w.m_txt] {
            assert!((m.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn noiseless_world_is_solved_by_the_baseline() {
        let cfg = SynthConfig { n_items: 120, sigma_image: 0.0, sigma_caption: 0.0, gap: 0.0, ..Default::default() };
        let store = generate(&cfg).unwrap();
        let r = oracle_metrics(&store, Strategy::None, &RocchioParams::default(), 1, None).unwrap();
        assert_eq!(r.hits_at_1, 1.0);
        assert_eq!(r.mrr_at_5, 1.0);
    }

    #[test]
    fn caption_noise_hurts_monotonically() {
        let mrr: Vec<f64> = [0.2, 0.4, 0.8]
            .iter()
            .map(|&s| {
                let store = generate(&SynthConfig { sigma_caption: s, ..Default::default() }).unwrap();
                oracle_metrics(&store, Strategy::None, &RocchioParams::default(), 1, None).unwrap().mrr_at_5
            })
            .collect();
        assert!(mrr[0] >= mrr[1] && mrr[1] >= mrr[2], "{mrr:?}");
    }

    #[test]
    fn padded_tokens_are_masked_and_zero() {
        let store = generate(&small()).unwrap();
        let q = store.query_token_features.as_ref().unwrap();
        let mut padded = 0;
        for i in 0..q.items() {
            for (pos, &m) in q.item_mask(i).iter().enumerate() {
                if m == 0 {
                    padded += 1;
                    assert!(q.item(i)[pos * q.dim()..(pos + 1) * q.dim()].iter().all(|&v| v == 0.0));
                }
            }
        }
        assert!(padded > 0);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(generate(&SynthConfig { n_items: 0, ..small() }).is_err());
        assert!(generate(&SynthConfig { captions_per_item: 6, ..small() }).is_err());
        assert!(generate(&SynthConfig { gap: -1.0, ..small() }).is_err());
    }
}
