//! Turning cross-attention into refinement weights and saliency maps.

use serde::{Deserialize, Serialize};

use super::{AfsError, Modality, RelevanceSequence};
use crate::ranker::Component;
use crate::rocchio::{combine, softmax_with_temperature, weighted_sum, RefinementBreakdown, RocchioError, RocchioParams};
use crate::tensor::Tensor;

/// Per feedback item, the accumulated attention its image patches and its
/// caption tokens received.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemScores {
    pub image: Vec<f64>,
    pub caption: Option<Vec<f64>>,
}

/// Attention received by each sequence position, summed over heads and
/// over the valid query rows (CLS included).
pub fn position_scores(attn: &[Tensor<f32>], query_rows: &[bool]) -> Vec<f64> {
    let s_r = attn.first().map_or(0, |t| t.cols());
    let mut out = vec![0.0f64; s_r];
    for head in attn {
        for (r, &valid) in query_rows.iter().enumerate() {
            if !valid {
                continue;
            }
            for (o, &v) in out.iter_mut().zip(head.row(r)) {
                *o += v as f64;
            }
        }
    }
    out
}

/// Mean of the accumulated position scores over each item's valid positions,
/// separately for images and captions.
pub fn accumulate_item_scores(attn: &[Tensor<f32>], query_rows: &[bool], seq: &RelevanceSequence) -> ItemScores {
    let pos = position_scores(attn, query_rows);
    let k = seq.k();
    let mut sums = [vec![0.0f64; k], vec![0.0f64; k]];
    let mut counts = [vec![0usize; k], vec![0usize; k]];
    for (i, seg) in seq.segments.iter().enumerate() {
        if !seq.mask[i] {
            continue;
        }
        let m = (seg.modality == Modality::Caption) as usize;
        sums[m][seg.item] += pos[i];
        counts[m][seg.item] += 1;
    }
    let mean = |m: usize| -> Vec<f64> {
        sums[m].iter().zip(&counts[m]).map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 }).collect()
    };
    ItemScores { image: mean(0), caption: seq.with_captions.then(|| mean(1)) }
}

/// `softmax(-scores / tau)`: items that drew little attention weigh most.
pub fn negative_weights(item_scores: &[f64], tau: f64) -> Result<Vec<f64>, RocchioError> {
    let neg: Vec<f64> = item_scores.iter().map(|s| -s).collect();
    softmax_with_temperature(&neg, tau)
}

/// `z' = a*z + b*z_cls - c * sum_j (w_img_j z_img_j + w_cap_j z_cap_j) / 2`.
///
/// Without captions the caption term is dropped and the image sum is not
/// halved. The breakdown's `negative_weights` holds the image weights
/// followed by the caption weights.
pub fn refine_query_afs<A: Component, R: AsRef<[A]>>(
    z_q: &[f64],
    z_cls: &[f64],
    images: &[R],
    captions: Option<&[R]>,
    scores: &ItemScores,
    params: &RocchioParams,
) -> Result<RefinementBreakdown, AfsError> {
    let d = z_q.len();
    if z_cls.len() != d {
        return Err(AfsError::Input(format!("z_cls has {} dims, query has {d}", z_cls.len())));
    }
    let k = images.len();
    if scores.image.len() != k || images.iter().any(|r| r.as_ref().len() != d) {
        return Err(AfsError::Input("image embeddings do not match the feedback items".into()));
    }
    let w_img = negative_weights(&scores.image, params.tau)?;
    let mut negative_weights_all = w_img.clone();
    let negative_vector = match (captions, &scores.caption) {
        (Some(caps), Some(cap_scores)) => {
            if caps.len() != k || cap_scores.len() != k || caps.iter().any(|r| r.as_ref().len() != d) {
                return Err(AfsError::Input("caption embeddings do not match the feedback items".into()));
            }
            let w_cap = negative_weights(cap_scores, params.tau)?;
            let a = weighted_sum(images, &w_img, d);
            let b = weighted_sum(caps, &w_cap, d);
            negative_weights_all.extend_from_slice(&w_cap);
            a.iter().zip(&b).map(|(x, y)| (x + y) / 2.0).collect()
        }
        (None, _) => weighted_sum(images, &w_img, d),
        (Some(_), None) => return Err(AfsError::Input("caption embeddings given without caption scores".into())),
    };
    let refined_query = combine(z_q, z_cls, &negative_vector, params.alpha, params.beta, params.gamma);
    Ok(RefinementBreakdown {
        refined_query,
        positive_vector: z_cls.to_vec(),
        negative_vector,
        positive_weights: Vec::new(),
        negative_weights: negative_weights_all,
    })
}

/// Saliency for one feedback item: per-patch and per-token values in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemSaliency {
    /// Store index of the item.
    pub item: usize,
    pub patches: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<f64>>,
    pub image_score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub caption_score: Option<f64>,
}

fn min_max(values: &mut [f64], valid: &[bool]) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (&v, &ok) in values.iter().zip(valid) {
        if ok {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let range = hi - lo;
    for (v, &ok) in values.iter_mut().zip(valid) {
        *v = if ok && range > 0.0 { (*v - lo) / range } else { 0.0 };
    }
}

/// Accumulated attention split into the image and caption subsequences and
/// min-max scaled within each; a constant subsequence maps to zeros and
/// padded positions are zero.
pub fn saliency(attn: &[Tensor<f32>], query_rows: &[bool], seq: &RelevanceSequence) -> Vec<ItemSaliency> {
    let pos = position_scores(attn, query_rows);
    let k = seq.k();
    let split = k * seq.p;
    let mut img = pos[..split].to_vec();
    let mut cap = pos[split..].to_vec();
    min_max(&mut img, &seq.mask[..split]);
    min_max(&mut cap, &seq.mask[split..]);
    let scores = accumulate_item_scores(attn, query_rows, seq);
    (0..k)
        .map(|j| ItemSaliency {
            item: seq.items[j],
            patches: img[j * seq.p..(j + 1) * seq.p].to_vec(),
            tokens: seq.with_captions.then(|| cap[j * seq.s..(j + 1) * seq.s].to_vec()),
            image_score: scores.image[j],
            caption_score: scores.caption.as_ref().map(|c| c[j]),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Relevant,
    Irrelevant,
}

/// Patches of one feedback image marked by the user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionBox {
    /// Position of the item in the feedback list.
    pub item: usize,
    pub patches: Vec<usize>,
    pub polarity: Polarity,
}

/// Per-position logit offsets: `+magnitude` on relevant-marked patches,
/// `-magnitude` on irrelevant-marked ones (a patch marked both ways nets
/// zero), zero elsewhere.
pub fn region_bias_vector(seq: &RelevanceSequence, boxes: &[RegionBox], magnitude: f64) -> Result<Vec<f64>, AfsError> {
    if !(magnitude.is_finite() && magnitude >= 0.0) {
        return Err(AfsError::Input(format!("region bias magnitude must be finite and >= 0, got {magnitude}")));
    }
    let mut relevant = vec![false; seq.len()];
    let mut irrelevant = vec![false; seq.len()];
    for b in boxes {
        if b.item >= seq.k() {
            return Err(AfsError::ItemOutOfRange { item: b.item, k: seq.k() });
        }
        for &patch in &b.patches {
            if patch >= seq.p {
                return Err(AfsError::PatchOutOfRange { item: b.item, patch, p: seq.p });
            }
            let pos = seq.image_position(b.item, patch);
            match b.polarity {
                Polarity::Relevant => relevant[pos] = true,
                Polarity::Irrelevant => irrelevant[pos] = true,
            }
        }
    }
    Ok(relevant
        .iter()
        .zip(&irrelevant)
        .map(|(&r, &i)| magnitude * ((r as i32 - i as i32) as f64))
        .collect())
}

/// Adds the region bias to every row of pre-softmax cross-attention logits.
pub fn apply_region_bias(
    logits: &Tensor<f64>,
    seq: &RelevanceSequence,
    boxes: &[RegionBox],
    magnitude: f64,
) -> Result<Tensor<f64>, AfsError> {
    if logits.cols() != seq.len() {
        return Err(AfsError::Input(format!("logits have {} columns for {} positions", logits.cols(), seq.len())));
    }
    let bias = region_bias_vector(seq, boxes, magnitude)?;
    let mut out = logits.clone();
    let cols = out.cols();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v += bias[i % cols];
    }
    Ok(out)
}
