use serde::Serialize;

use super::params::BoundParams;
use super::train::TrainExample;
use super::{build_relevance_sequence, AfsConfig, AfsError, LossMode, RelevanceSequence};
use crate::ranker::cosine_similarity;
use crate::store::EmbeddingStore;
use super::AfsParams;
use crate::tensor::{attention, gradcheck, GradcheckConfig, GradcheckReport, Scalar, Tape, Tensor, Var};

/// Handles into the tape for one forward pass.
#[derive(Debug, Clone)]
pub struct AfsForward {
    /// `1 x d` summary vector.
    pub z_cls: Var,
    /// Cross-attention weights per head, `(1 + s_q) x s_r`.
    pub cross_scores: Vec<Var>,
}

fn linear<T: Scalar>(tape: &mut Tape<T>, p: &BoundParams, x: Var, w: &str, b: &str) -> Result<Var, AfsError> {
    let y = tape.matmul(x, p.get(w))?;
    Ok(tape.add_row(y, p.get(b))?)
}

fn layer_norm<T: Scalar>(tape: &mut Tape<T>, p: &BoundParams, x: Var, prefix: &str) -> Result<Var, AfsError> {
    Ok(tape.layer_norm(x, p.get(&format!("{prefix}_g")), p.get(&format!("{prefix}_b")))?)
}

#[allow(clippy::too_many_arguments)]
fn multi_head<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    config: &AfsConfig,
    block: &str,
    queries: Var,
    keys: Var,
    key_mask: &[bool],
    key_bias: Option<&[T]>,
) -> Result<(Var, Vec<Var>), AfsError> {
    let q = linear(tape, p, queries, &format!("{block}.wq"), &format!("{block}.bq"))?;
    let k = linear(tape, p, keys, &format!("{block}.wk"), &format!("{block}.bk"))?;
    let v = linear(tape, p, keys, &format!("{block}.wv"), &format!("{block}.bv"))?;
    let dh = config.head_dim();
    let mut heads = Vec::with_capacity(config.n_h);
    let mut scores = Vec::with_capacity(config.n_h);
    for h in 0..config.n_h {
        let (a, b) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, a, b)?;
        let kh = tape.slice_cols(k, a, b)?;
        let vh = tape.slice_cols(v, a, b)?;
        let (out, s) = attention(tape, qh, kh, vh, Some(key_mask), key_bias)?;
        heads.push(out);
        scores.push(s);
    }
    let merged = tape.concat_cols(&heads)?;
    let out = linear(tape, p, merged, &format!("{block}.wo"), &format!("{block}.bo"))?;
    Ok((out, scores))
}

fn feed_forward<T: Scalar>(tape: &mut Tape<T>, p: &BoundParams, block: &str, h: Var) -> Result<Var, AfsError> {
    let x = layer_norm(tape, p, h, &format!("{block}.ffn_ln"))?;
    let x = linear(tape, p, x, &format!("{block}.ffn_w1"), &format!("{block}.ffn_b1"))?;
    let x = tape.relu(x);
    let x = linear(tape, p, x, &format!("{block}.ffn_w2"), &format!("{block}.ffn_b2"))?;
    Ok(tape.add(h, x)?)
}

/// One forward pass. `query_tokens` is `s_q x d_t` with validity
/// `query_mask`; `key_bias`, when given, is added to every cross-attention
/// logit row before the softmax.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &BoundParams,
    config: &AfsConfig,
    query_tokens: &Tensor<f32>,
    query_mask: &[bool],
    seq: &RelevanceSequence,
    key_bias: Option<&[T]>,
) -> Result<AfsForward, AfsError> {
    if query_tokens.cols() != config.d_t || seq.features.cols() != config.d_t {
        return Err(AfsError::Input(format!(
            "token width {} / relevance width {} differ from d_t={}",
            query_tokens.cols(),
            seq.features.cols(),
            config.d_t
        )));
    }
    if query_mask.len() != query_tokens.rows() {
        return Err(AfsError::Input("query mask length differs from query token count".into()));
    }
    if let Some(b) = key_bias {
        if b.len() != seq.len() {
            return Err(AfsError::Input(format!("key bias has {} entries for {} positions", b.len(), seq.len())));
        }
    }

    let tokens = tape.constant(query_tokens.cast());
    let h = tape.concat_rows(&[params.get("cls"), tokens])?;
    let mut self_mask = Vec::with_capacity(query_mask.len() + 1);
    self_mask.push(true);
    self_mask.extend_from_slice(query_mask);

    let r = tape.constant(seq.features.cast());
    let r = linear(tape, params, r, "in_w", "in_b")?;
    let r = layer_norm(tape, params, r, "rel_ln")?;

    let x = layer_norm(tape, params, h, "cross.ln")?;
    let (cross, cross_scores) = multi_head(tape, params, config, "cross", x, r, &seq.mask, key_bias)?;
    let mut h = tape.add(h, cross)?;
    if config.ffn {
        h = feed_forward(tape, params, "cross", h)?;
    }

    let x = layer_norm(tape, params, h, "self.ln")?;
    let (selfo, _) = multi_head(tape, params, config, "self", x, x, &self_mask, None)?;
    let mut h = tape.add(h, selfo)?;
    if config.ffn {
        h = feed_forward(tape, params, "self", h)?;
    }

    let cls = tape.row(h, 0)?;
    let z_cls = linear(tape, params, cls, "out_w", "out_b")?;
    Ok(AfsForward { z_cls, cross_scores })
}

/// `1 - cos(z_cls, z_img)`.
pub fn loss_image(z_cls: &[f64], z_img: &[f32]) -> Result<f64, AfsError> {
    cosine_similarity(z_cls, z_img).map(|c| 1.0 - c).map_err(|e| AfsError::Input(e.to_string()))
}

/// `1 - cos(z_cls, mean held-out caption)`.
pub fn loss_caption(z_cls: &[f64], z_cap_mean: &[f32]) -> Result<f64, AfsError> {
    loss_image(z_cls, z_cap_mean)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    pub l_img: Vec<f64>,
    pub l_cap: Vec<f64>,
    pub total: f64,
}

/// Mini-batch loss: half the summed components when both are enabled, the
/// plain sum of the single component otherwise.
pub fn batch_loss(l_img: &[f64], l_cap: &[f64], mode: LossMode) -> LossReport {
    let si: f64 = l_img.iter().sum();
    let sc: f64 = l_cap.iter().sum();
    let total = match mode {
        LossMode::Both => 0.5 * (si + sc),
        LossMode::ImageOnly => si,
        LossMode::CaptionOnly => sc,
    };
    LossReport { l_img: l_img.to_vec(), l_cap: l_cap.to_vec(), total }
}

/// Records the mini-batch loss for `examples` on `tape` and returns it.
pub fn batch_objective<T: Scalar>(
    tape: &mut Tape<T>,
    params: &BoundParams,
    config: &AfsConfig,
    store: &EmbeddingStore,
    examples: &[TrainExample],
) -> Result<Var, AfsError> {
    let query = store.query_token_features.as_ref().ok_or(AfsError::MissingFeatures("query token features"))?;
    let with_captions = config.s > 0;
    let mut terms = Vec::with_capacity(examples.len() * 2);
    for ex in examples {
        let seq = build_relevance_sequence(store, &ex.feedback, with_captions)?;
        let tokens = Tensor::new(query.positions(), query.dim(), query.item(ex.query_row).to_vec());
        let out = forward(tape, params, config, &tokens, &query.valid_mask(ex.query_row), &seq, None)?;
        if config.loss_mode.uses_image() {
            let target = tape.constant(Tensor::row_vector(ex.target_img.clone()).cast());
            terms.push(tape.cosine_distance(out.z_cls, target)?);
        }
        if config.loss_mode.uses_caption() {
            let cap = ex
                .target_cap
                .as_ref()
                .ok_or_else(|| AfsError::Input(format!("example for item {} has no caption target", ex.item)))?;
            let target = tape.constant(Tensor::row_vector(cap.clone()).cast());
            terms.push(tape.cosine_distance(out.z_cls, target)?);
        }
    }
    let stacked = tape.concat_cols(&terms)?;
    let total = tape.sum(stacked);
    Ok(match config.loss_mode {
        LossMode::Both => tape.scale(total, T::of(0.5)),
        _ => total,
    })
}

/// Compares the tape gradient of [`batch_objective`] with central finite
/// differences at `params`.
pub fn gradcheck_objective(
    params: &AfsParams<f64>,
    config: &AfsConfig,
    store: &EmbeddingStore,
    examples: &[TrainExample],
    check: &GradcheckConfig,
) -> Result<GradcheckReport, AfsError> {
    let names: Vec<String> = params.entries().iter().map(|(n, _)| n.clone()).collect();
    let objective = |tape: &mut Tape<f64>, vars: &[Var]| {
        batch_objective(tape, &BoundParams::from_vars(names.clone(), vars), config, store, examples)
    };
    // Input problems surface here; the perturbed evaluations can then only fail on tensor errors.
    let mut probe = Tape::new();
    let vars: Vec<Var> = params.entries().iter().map(|(_, t)| probe.param(t.clone())).collect();
    objective(&mut probe, &vars)?;
    let f = |tape: &mut Tape<f64>, vars: &[Var]| {
        objective(tape, vars).map_err(|e| match e {
            AfsError::Tensor(t) => t,
            other => unreachable!("objective failed after a successful probe: {other}"),
        })
    };
    Ok(gradcheck(f, params.entries(), check)?)
}
