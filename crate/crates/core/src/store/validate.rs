use std::collections::HashSet;
use std::fmt;

use serde::Serialize;

use super::{EmbeddingMatrix, EmbeddingStore, TokenFeatureTensor};

pub const MAX_CAPTIONS_PER_ITEM: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    CaptionCount,
    IndexOutOfRange,
    DuplicateId,
    Dimension,
    RowCount,
    NonFinite,
    ZeroNorm,
    Mask,
}

impl ViolationKind {
    pub fn label(self) -> &'static str {
        match self {
            ViolationKind::CaptionCount => "caption count",
            ViolationKind::IndexOutOfRange => "index out of range",
            ViolationKind::DuplicateId => "duplicate id",
            ViolationKind::Dimension => "dimension",
            ViolationKind::RowCount => "row count",
            ViolationKind::NonFinite => "non-finite value",
            ViolationKind::ZeroNorm => "zero norm",
            ViolationKind::Mask => "mask",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, kind: ViolationKind) -> usize {
        self.violations.iter().filter(|v| v.kind == kind).count()
    }

    fn push(&mut self, kind: ViolationKind, message: String) {
        self.violations.push(Violation { kind, message });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            writeln!(f, "  {}: {}", v.kind.label(), v.message)?;
        }
        Ok(())
    }
}

fn check_matrix(report: &mut ValidationReport, role: &str, m: &EmbeddingMatrix, d: usize) {
    if m.dim() != d {
        report.push(ViolationKind::Dimension, format!("{role}: dim {} but store d is {d}", m.dim()));
    }
    if m.dim() == 0 {
        return;
    }
    for (r, row) in m.iter_rows().enumerate() {
        if let Some(c) = row.iter().position(|v| !v.is_finite()) {
            report.push(ViolationKind::NonFinite, format!("{role}: row {r} column {c}"));
            continue;
        }
        if row.iter().all(|&v| v == 0.0) {
            report.push(ViolationKind::ZeroNorm, format!("{role}: row {r}"));
        }
    }
}

fn check_tokens(
    report: &mut ValidationReport,
    role: &str,
    t: &TokenFeatureTensor,
    d_t: usize,
    expected_items: usize,
) {
    if t.dim() != d_t {
        report.push(ViolationKind::Dimension, format!("{role}: d_t {} but store d_t is {d_t}", t.dim()));
    }
    if t.items() != expected_items {
        report.push(ViolationKind::RowCount, format!("{role}: {} items, expected {expected_items}", t.items()));
    }
    if let Some(i) = t.values().iter().position(|v| !v.is_finite()) {
        let per_item = (t.positions() * t.dim()).max(1);
        report.push(ViolationKind::NonFinite, format!("{role}: item {} (flat index {i})", i / per_item));
    }
    for i in 0..t.items() {
        let mask = t.item_mask(i);
        if mask.iter().any(|&m| m > 1) {
            report.push(ViolationKind::Mask, format!("{role}: item {i} has mask values other than 0/1"));
        } else if !mask.contains(&1) {
            report.push(ViolationKind::Mask, format!("{role}: item {i} has no valid positions"));
        }
    }
}

/// Checks every store invariant and returns the violations found.
pub fn validate_store(store: &EmbeddingStore) -> ValidationReport {
    let mut report = ValidationReport::default();
    let (d, d_t) = (store.meta.d, store.meta.d_t);
    if d == 0 {
        report.push(ViolationKind::Dimension, "d must be at least 1".into());
    }

    check_matrix(&mut report, "image_embeddings", &store.image_embeddings, d);
    check_matrix(&mut report, "caption_embeddings", &store.caption_embeddings, d);
    check_matrix(&mut report, "synthetic_caption_embeddings", &store.synthetic_caption_embeddings, d);

    let n_images = store.image_embeddings.rows();
    let n_captions = store.caption_embeddings.rows();
    let n_synth = store.synthetic_caption_embeddings.rows();
    if let Some(t) = &store.image_token_features {
        check_tokens(&mut report, "image_token_features", t, d_t, n_images);
    }
    if let Some(t) = &store.synthetic_caption_token_features {
        check_tokens(&mut report, "synthetic_caption_token_features", t, d_t, n_synth);
    }
    if let Some(t) = &store.query_token_features {
        check_tokens(&mut report, "query_token_features", t, d_t, n_captions);
    }
    if let Some(mv) = &store.image_multivector {
        if mv.dim() != d {
            report.push(ViolationKind::Dimension, format!("image_multivector: dim {} but store d is {d}", mv.dim()));
        }
        if mv.items() != n_images {
            report.push(
                ViolationKind::RowCount,
                format!("image_multivector: {} items, expected {n_images}", mv.items()),
            );
        }
        if mv.per_item() == 0 {
            report.push(ViolationKind::RowCount, "image_multivector: zero vectors per item".into());
        }
        if let Some(i) = mv.values().iter().position(|v| !v.is_finite()) {
            report.push(ViolationKind::NonFinite, format!("image_multivector: flat index {i}"));
        }
    }

    let mut item_ids = HashSet::new();
    let mut caption_ids = HashSet::new();
    let mut caption_owner = vec![false; n_captions];
    for item in &store.items {
        let id = &item.item_id;
        if !item_ids.insert(id.as_str()) {
            report.push(ViolationKind::DuplicateId, format!("item_id {id} appears more than once"));
        }
        let nc = item.human_captions.len();
        if nc == 0 || nc > MAX_CAPTIONS_PER_ITEM {
            report.push(
                ViolationKind::CaptionCount,
                format!("item {id} has {nc} human captions (allowed 1..={MAX_CAPTIONS_PER_ITEM})"),
            );
        }
        for c in &item.human_captions {
            if !caption_ids.insert(c.caption_id.as_str()) {
                report.push(ViolationKind::DuplicateId, format!("caption_id {} appears more than once", c.caption_id));
            }
        }
        if item.image_row >= n_images {
            report.push(
                ViolationKind::IndexOutOfRange,
                format!("item {id}: image_row {} >= {n_images}", item.image_row),
            );
        }
        if item.synthetic_caption_row >= n_synth {
            report.push(
                ViolationKind::IndexOutOfRange,
                format!("item {id}: synthetic_caption_row {} >= {n_synth}", item.synthetic_caption_row),
            );
        }
        let rows = item.caption_rows();
        if rows.end > n_captions {
            report.push(
                ViolationKind::IndexOutOfRange,
                format!("item {id}: caption rows {}..{} exceed {n_captions}", rows.start, rows.end),
            );
        } else {
            for r in rows {
                if std::mem::replace(&mut caption_owner[r], true) {
                    report.push(ViolationKind::IndexOutOfRange, format!("item {id}: caption row {r} already owned"));
                }
            }
        }
    }
    report
}
