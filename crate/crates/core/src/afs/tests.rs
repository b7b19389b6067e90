use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::store::testutil::{tiny_store, token_store};
use crate::tensor::GradcheckConfig;

fn model(seed: u64, ffn: bool) -> (EmbeddingStore, AfsModel) {
    let store = tiny_store();
    let mut config = AfsConfig::for_store(&store, 2, 2, seed).unwrap();
    config.ffn = ffn;
    let m = AfsModel::init(config).unwrap();
    (store, m)
}

fn gradcheck_mode(mode: LossMode, ffn: bool) -> GradcheckReport {
    let store = token_store(2, 8);
    let mut config = AfsConfig::for_store(&store, 2, 2, 5).unwrap();
    config.loss_mode = mode;
    config.ffn = ffn;
    let examples = prepare_examples(&store, &config, &[(0, 1), (1, 2)]).unwrap();
    gradcheck_objective(&AfsParams::init(&config), &config, &store, &examples, &GradcheckConfig::default()).unwrap()
}

use crate::tensor::GradcheckReport;

#[test]
fn gradcheck_every_loss_mode() {
    for mode in [LossMode::ImageOnly, LossMode::CaptionOnly, LossMode::Both] {
        for ffn in [false, true] {
            let report = gradcheck_mode(mode, ffn);
            assert!(report.checked > 100, "{mode:?}: only {} scalars", report.checked);
            assert!(report.passed(), "{mode:?} ffn={ffn}: {:?}", &report.failures[..report.failures.len().min(5)]);
        }
    }
}

#[test]
fn cross_attention_rows_sum_to_one() {
    let (store, m) = model(1, false);
    let inf = m.infer(&store, 0, &[0, 1, 2], true, None).unwrap();
    assert_eq!(inf.cross_attention.len(), 2);
    for head in &inf.cross_attention {
        assert_eq!(head.shape(), (1 + 3, inf.sequence.len()));
        for r in 0..head.rows() {
            let s: f64 = head.row(r).iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
            for (c, &valid) in inf.sequence.mask.iter().enumerate() {
                if !valid {
                    assert_eq!(head.at(r, c), 0.0);
                }
            }
        }
    }
}

#[test]
fn single_position_attends_fully() {
    let mut parts = tiny_store().into_parts();
    let img = parts.image_token_features.take().unwrap();
    let mask: Vec<u8> = (0..img.mask().len()).map(|i| (i % 2 == 0) as u8).collect();
    parts.image_token_features =
        Some(crate::store::TokenFeatureTensor::new(img.items(), img.positions(), img.dim(), img.values().to_vec(), mask));
    let store = EmbeddingStore::from_parts(parts);
    let m = AfsModel::init(AfsConfig::for_store(&store, 2, 1, 1).unwrap()).unwrap();
    let inf = m.infer(&store, 0, &[1], false, None).unwrap();
    for head in &inf.cross_attention {
        assert!(head.data().chunks(2).all(|row| row == [1.0, 0.0]));
    }
}

#[test]
fn seeds_and_determinism() {
    let (store, a) = model(1, false);
    let (_, b) = model(1, false);
    let (_, c) = model(2, false);
    let za = a.infer(&store, 3, &[0, 2], true, None).unwrap().z_cls;
    assert_eq!(za, b.infer(&store, 3, &[0, 2], true, None).unwrap().z_cls);
    assert_ne!(za, c.infer(&store, 3, &[0, 2], true, None).unwrap().z_cls);
    assert!(za.iter().all(|v| v.is_finite()));
}

#[test]
fn z_cls_is_permutation_invariant() {
    for ffn in [false, true] {
        let (store, m) = model(9, ffn);
        for row in 0..6 {
            let a = m.infer(&store, row, &[0, 1, 2], true, None).unwrap().z_cls;
            for perm in [[2, 0, 1], [1, 2, 0], [2, 1, 0]] {
                let b = m.infer(&store, row, &perm, true, None).unwrap().z_cls;
                let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                assert!(diff <= 1e-5, "row {row} perm {perm:?}: {diff}");
            }
        }
    }
}

#[test]
fn losses_stay_in_range() {
    let (store, m) = model(4, false);
    let ex = prepare_examples(&store, &m.config, &[(0, 0), (1, 3), (2, 5)]).unwrap();
    for e in &ex {
        let z = m.infer(&store, e.query_row, &e.feedback, true, None).unwrap().z_cls;
        let li = loss_image(&z, &e.target_img).unwrap();
        let lc = loss_caption(&z, e.target_cap.as_ref().unwrap()).unwrap();
        assert!((0.0..=2.0).contains(&li) && (0.0..=2.0).contains(&lc));
    }
}

#[test]
fn batch_objective_matches_loss_recomposition() {
    let (store, base) = model(6, false);
    for mode in [LossMode::ImageOnly, LossMode::CaptionOnly, LossMode::Both] {
        let mut m = base.clone();
        m.config.loss_mode = mode;
        let ex = prepare_examples(&store, &m.config, &[(0, 1), (1, 2)]).unwrap();
        let (mut li, mut lc) = (vec![], vec![]);
        for e in &ex {
            let z = m.infer(&store, e.query_row, &e.feedback, true, None).unwrap().z_cls;
            li.push(loss_image(&z, &e.target_img).unwrap());
            lc.push(e.target_cap.as_ref().map_or(0.0, |t| loss_caption(&z, t).unwrap()));
        }
        let mut tape = Tape::<f32>::new();
        let bound = m.params.bind(&mut tape, false);
        let total = batch_objective(&mut tape, &bound, &m.config, &store, &ex).unwrap();
        let want = batch_loss(&li, &lc, mode).total;
        assert!((tape.value(total).item() as f64 - want).abs() < 1e-5, "{mode:?}");
    }
}

fn random_attention(rng: &mut ChaCha8Rng, heads: usize, rows: usize, seq: &RelevanceSequence) -> Vec<Tensor<f32>> {
    (0..heads)
        .map(|_| {
            let logits: Vec<f64> = (0..rows * seq.len()).map(|_| rng.random_range(-2.0..2.0)).collect();
            crate::tensor::softmax_rows(&Tensor::<f32>::from_f64(rows, seq.len(), &logits), Some(&seq.mask)).unwrap()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn accumulation_matches_scalar_loop(seed in any::<u64>(), mask_row in any::<bool>()) {
        let store = tiny_store();
        let seq = build_relevance_sequence(&store, &[2, 0, 1], true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let attn = random_attention(&mut rng, 3, 4, &seq);
        let rows = [true, true, !mask_row, true];
        let got = accumulate_item_scores(&attn, &rows, &seq);

        let (k, p, s) = (3, seq.p, seq.s);
        for j in 0..k {
            for (modality, width, base) in [(0, p, j * p), (1, s, k * p + j * s)] {
                let mut sum = 0.0;
                let mut n = 0;
                for off in 0..width {
                    let pos = base + off;
                    if !seq.mask[pos] { continue; }
                    n += 1;
                    for h in &attn {
                        for (r, &ok) in rows.iter().enumerate() {
                            if ok { sum += h.at(r, pos) as f64; }
                        }
                    }
                }
                let want = sum / n as f64;
                let have = if modality == 0 { got.image[j] } else { got.caption.as_ref().unwrap()[j] };
                prop_assert!((want - have).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn refine_matches_scalar_oracle(
        z in prop::collection::vec(-1.0f64..1.0, 4),
        cls in prop::collection::vec(-3.0f64..3.0, 4),
        si in prop::collection::vec(0.0f64..2.0, 3),
        sc in prop::collection::vec(0.0f64..2.0, 3),
        emb in prop::collection::vec(-1.0f32..1.0, 24),
        with_caps in any::<bool>(),
    ) {
        let imgs: Vec<&[f32]> = emb[..12].chunks(4).collect();
        let caps: Vec<&[f32]> = emb[12..].chunks(4).collect();
        let scores = ItemScores { image: si.clone(), caption: with_caps.then(|| sc.clone()) };
        let p = RocchioParams::default();
        let r = refine_query_afs(&z, &cls, &imgs, with_caps.then_some(caps.as_slice()), &scores, &p).unwrap();

        let soft = |s: &[f64]| {
            let e: Vec<f64> = s.iter().map(|v| (-v / p.tau).exp()).collect();
            let t: f64 = e.iter().sum();
            e.iter().map(|v| v / t).collect::<Vec<_>>()
        };
        let (wi, wc) = (soft(&si), soft(&sc));
        for c in 0..4 {
            let mut neg = 0.0;
            for j in 0..3 {
                if with_caps {
                    neg += (wi[j] * imgs[j][c] as f64 + wc[j] * caps[j][c] as f64) / 2.0;
                } else {
                    neg += wi[j] * imgs[j][c] as f64;
                }
            }
            let want = p.alpha * z[c] + p.beta * cls[c] - p.gamma * neg;
            prop_assert!((r.refined_query[c] - want).abs() < 1e-9);
        }
    }

    #[test]
    fn negative_weights_antitone(scores in prop::collection::vec(-1.0f64..1.0, 1..8), tau in 0.01f64..2.0) {
        let w = negative_weights(&scores, tau).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if scores[i] < scores[j] { prop_assert!(w[i] >= w[j]); }
            }
        }
    }

    #[test]
    fn saliency_preserves_order(seed in any::<u64>()) {
        let store = tiny_store();
        let seq = build_relevance_sequence(&store, &[0, 1, 2], true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let attn = random_attention(&mut rng, 2, 3, &seq);
        let rows = [true; 3];
        let raw = inference::position_scores(&attn, &rows);
        let sal = saliency(&attn, &rows, &seq);
        let mut flat_img = vec![];
        let mut flat_cap = vec![];
        for it in &sal {
            flat_img.extend(it.patches.iter().copied());
            flat_cap.extend(it.tokens.as_ref().unwrap().iter().copied());
        }
        let split = 3 * seq.p;
        for (vals, off) in [(&flat_img, 0), (&flat_cap, split)] {
            let valid: Vec<usize> = (0..vals.len()).filter(|&i| seq.mask[off + i]).collect();
            prop_assert!(vals.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(valid.iter().any(|&i| vals[i] == 0.0));
            prop_assert!(valid.iter().any(|&i| vals[i] == 1.0));
            for &a in &valid {
                for &b in &valid {
                    if raw[off + a] < raw[off + b] { prop_assert!(vals[a] <= vals[b]); }
                }
            }
        }
    }

    #[test]
    fn region_bias_moves_mass_toward_marked_patches(seed in 0u64..1000, patch in 0usize..2, item in 0usize..3) {
        let (store, m) = model(seed, false);
        let items = [0, 1, 2];
        let plain = m.infer(&store, 1, &items, true, None).unwrap();
        let seq = &plain.sequence;
        let boxes = [RegionBox { item, patches: vec![patch], polarity: Polarity::Relevant }];
        let bias = region_bias_vector(seq, &boxes, 1.0).unwrap();
        let biased = m.infer(&store, 1, &items, true, Some(&bias)).unwrap();
        let target = seq.image_position(item, patch);
        for (h0, h1) in plain.cross_attention.iter().zip(&biased.cross_attention) {
            for r in 0..h0.rows() {
                prop_assert!(h1.at(r, target) > h0.at(r, target));
                for c in (0..seq.len()).filter(|&c| c != target) {
                    prop_assert!(h1.at(r, c) <= h0.at(r, c) + 1e-7);
                }
            }
        }
    }
}

#[test]
fn match_norm_rescales_to_reference() {
    let v = match_norm(&[3.0, 4.0], &[0.0, 2.0]);
    assert!((v[0] - 1.2).abs() < 1e-12 && (v[1] - 1.6).abs() < 1e-12);
    assert_eq!(match_norm(&[0.0, 0.0], &[1.0, 1.0]), vec![0.0, 0.0]);
}
