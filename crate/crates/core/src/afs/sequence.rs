use serde::{Deserialize, Serialize};

use super::AfsError;
use crate::store::EmbeddingStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Caption,
}

/// Which feedback item (0-based position in the feedback list) and modality
/// a relevance-sequence position belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Segment {
    pub modality: Modality,
    pub item: usize,
    /// Patch or token index within the item.
    pub offset: usize,
}

/// Patch features of the K feedback images followed by token features of
/// their K synthetic captions.
#[derive(Debug, Clone)]
pub struct RelevanceSequence {
    pub features: Tensor<f32>,
    pub mask: Vec<bool>,
    pub segments: Vec<Segment>,
    /// Store indices of the feedback items in feedback order.
    pub items: Vec<usize>,
    pub p: usize,
    pub s: usize,
    pub with_captions: bool,
}

impl RelevanceSequence {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn k(&self) -> usize {
        self.items.len()
    }

    /// Sequence position of patch `patch` of feedback item `item`.
    pub fn image_position(&self, item: usize, patch: usize) -> usize {
        item * self.p + patch
    }

    pub fn caption_position(&self, item: usize, token: usize) -> usize {
        self.k() * self.p + item * self.s + token
    }
}

/// Builds the relevance sequence for the feedback items `items`. Without
/// captions only the image block is present.
pub fn build_relevance_sequence(
    store: &EmbeddingStore,
    items: &[usize],
    with_captions: bool,
) -> Result<RelevanceSequence, AfsError> {
    if items.is_empty() {
        return Err(AfsError::Input("relevance sequence needs at least one item".into()));
    }
    if let Some(&bad) = items.iter().find(|&&i| i >= store.len()) {
        return Err(AfsError::Input(format!("feedback item index {bad} outside store of {}", store.len())));
    }
    let img = store.image_token_features.as_ref().ok_or(AfsError::MissingFeatures("image token features"))?;
    let cap = if with_captions {
        Some(
            store
                .synthetic_caption_token_features
                .as_ref()
                .ok_or(AfsError::MissingFeatures("synthetic caption token features"))?,
        )
    } else {
        None
    };
    let d_t = img.dim();
    let p = img.positions();
    let s = cap.map_or(0, |c| c.positions());
    let k = items.len();
    let s_r = (p + s) * k;

    let mut data = Vec::with_capacity(s_r * d_t);
    let mut mask = Vec::with_capacity(s_r);
    let mut segments = Vec::with_capacity(s_r);
    for (j, &i) in items.iter().enumerate() {
        let row = store.items[i].image_row;
        data.extend_from_slice(img.item(row));
        mask.extend(img.item_mask(row).iter().map(|&m| m != 0));
        segments.extend((0..p).map(|offset| Segment { modality: Modality::Image, item: j, offset }));
    }
    if let Some(cap) = cap {
        if cap.dim() != d_t {
            return Err(AfsError::Input(format!("caption token width {} differs from patch width {d_t}", cap.dim())));
        }
        for (j, &i) in items.iter().enumerate() {
            let row = store.items[i].synthetic_caption_row;
            data.extend_from_slice(cap.item(row));
            mask.extend(cap.item_mask(row).iter().map(|&m| m != 0));
            segments.extend((0..s).map(|offset| Segment { modality: Modality::Caption, item: j, offset }));
        }
    }
    if !mask.iter().any(|&m| m) {
        return Err(AfsError::Input("relevance sequence is fully masked".into()));
    }
    Ok(RelevanceSequence {
        features: Tensor::new(s_r, d_t, data),
        mask,
        segments,
        items: items.to_vec(),
        p,
        s,
        with_captions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::testutil::tiny_store;
    use std::collections::HashMap;

    #[test]
    fn lengths_and_labels() {
        let store = tiny_store();
        // p = 2, s = 3 in the tiny store.
        let seq = build_relevance_sequence(&store, &[2, 0], true).unwrap();
        assert_eq!(seq.len(), (3 + 2) * 2);
        assert!(seq.segments[..4].iter().all(|s| s.modality == Modality::Image));
        assert!(seq.segments[4..].iter().all(|s| s.modality == Modality::Caption));
        assert_eq!(seq.segments[seq.caption_position(1, 2)], Segment { modality: Modality::Caption, item: 1, offset: 2 });
        assert_eq!(seq.features.row(0), &store.image_token_features.as_ref().unwrap().item(2)[..2]);

        let prf = build_relevance_sequence(&store, &[1], false).unwrap();
        assert_eq!(prf.len(), 2);
        assert!(prf.segments.iter().all(|s| s.modality == Modality::Image));
    }

    #[test]
    fn permutation_preserves_label_multiset() {
        let store = tiny_store();
        let count = |seq: &RelevanceSequence| {
            let mut m: HashMap<(Modality, usize), usize> = HashMap::new();
            for s in &seq.segments {
                *m.entry((s.modality, seq.items[s.item])).or_default() += 1;
            }
            m
        };
        let a = build_relevance_sequence(&store, &[0, 1, 2], true).unwrap();
        let b = build_relevance_sequence(&store, &[2, 0, 1], true).unwrap();
        assert_eq!(count(&a), count(&b));
    }

    #[test]
    fn missing_caption_features() {
        let mut parts = tiny_store().into_parts();
        parts.synthetic_caption_token_features = None;
        let store = EmbeddingStore::from_parts(parts);
        assert!(matches!(build_relevance_sequence(&store, &[0], true), Err(AfsError::MissingFeatures(_))));
        assert!(build_relevance_sequence(&store, &[0], false).is_ok());
    }
}
