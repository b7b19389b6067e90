use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::embt;
use super::{
    validate_store, EmbeddingMatrix, EmbeddingStore, ItemRecord, MultiVectorStack, StoreError, StoreMeta,
    StoreParts, TokenFeatureTensor,
};

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    backbone: String,
    split: String,
    d: usize,
    d_t: usize,
    tensors: TensorIndex,
    items: Vec<ItemRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorIndex {
    image_embeddings: MatrixEntry,
    caption_embeddings: MatrixEntry,
    synthetic_caption_embeddings: MatrixEntry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_token_features: Option<TokenEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    synthetic_caption_token_features: Option<TokenEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    query_token_features: Option<TokenEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_multivector: Option<MatrixEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MatrixEntry {
    file: String,
    shape: Vec<usize>,
    #[serde(default)]
    normalized: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct TokenEntry {
    file: String,
    mask: String,
    shape: Vec<usize>,
}

/// Writes `store` as a manifest plus EMBT tensors under `root`, creating the
/// directory if needed.
pub fn write_store(store: &EmbeddingStore, root: &Path) -> Result<(), StoreError> {
    fs::create_dir_all(root).map_err(|e| StoreError::io(root, e))?;

    let matrix = |name: &str, m: &EmbeddingMatrix| -> Result<MatrixEntry, StoreError> {
        let file = format!("{name}.embt");
        let shape = vec![m.rows(), m.dim()];
        embt::write_f32(&root.join(&file), &shape, m.values())?;
        Ok(MatrixEntry { file, shape, normalized: m.normalized })
    };
    let tokens = |name: &str, t: &TokenFeatureTensor| -> Result<TokenEntry, StoreError> {
        let file = format!("{name}.embt");
        let mask = format!("{name}.mask");
        let shape = vec![t.items(), t.positions(), t.dim()];
        embt::write_f32(&root.join(&file), &shape, t.values())?;
        embt::write_u8(&root.join(&mask), &shape[..2], t.mask())?;
        Ok(TokenEntry { file, mask, shape })
    };

    let tensors = TensorIndex {
        image_embeddings: matrix("image_embeddings", &store.image_embeddings)?,
        caption_embeddings: matrix("caption_embeddings", &store.caption_embeddings)?,
        synthetic_caption_embeddings: matrix("synthetic_caption_embeddings", &store.synthetic_caption_embeddings)?,
        image_token_features: store
            .image_token_features
            .as_ref()
            .map(|t| tokens("image_token_features", t))
            .transpose()?,
        synthetic_caption_token_features: store
            .synthetic_caption_token_features
            .as_ref()
            .map(|t| tokens("synthetic_caption_token_features", t))
            .transpose()?,
        query_token_features: store
            .query_token_features
            .as_ref()
            .map(|t| tokens("query_token_features", t))
            .transpose()?,
        image_multivector: store
            .image_multivector
            .as_ref()
            .map(|mv| {
                let file = "image_multivector.embt".to_string();
                let shape = vec![mv.items(), mv.per_item(), mv.dim()];
                embt::write_f32(&root.join(&file), &shape, mv.values())?;
                Ok::<_, StoreError>(MatrixEntry { file, shape, normalized: false })
            })
            .transpose()?,
    };

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        backbone: store.meta.backbone.clone(),
        split: store.meta.split.clone(),
        d: store.meta.d,
        d_t: store.meta.d_t,
        tensors,
        items: store.items.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| StoreError::Manifest(e.to_string()))?;
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, json).map_err(|e| StoreError::io(&path, e))
}

fn check_shape(role: &str, declared: &[usize], actual: &[usize], names: &[&'static str]) -> Result<(), StoreError> {
    if declared.len() != actual.len() {
        return Err(StoreError::Manifest(format!(
            "{role}: manifest declares rank {} but tensor header has rank {}",
            declared.len(),
            actual.len()
        )));
    }
    for ((&dec, &act), &what) in declared.iter().zip(actual).zip(names) {
        if dec != act {
            return Err(StoreError::DimensionMismatch { role: role.to_string(), what, declared: dec, actual: act });
        }
    }
    Ok(())
}

fn load_matrix(root: &Path, role: &str, entry: &MatrixEntry, d: usize) -> Result<EmbeddingMatrix, StoreError> {
    let (dims, values) = embt::read_f32(&root.join(&entry.file))?;
    check_shape(role, &entry.shape, &dims, &["rows", "d"])?;
    if dims[1] != d {
        return Err(StoreError::DimensionMismatch { role: role.to_string(), what: "d", declared: d, actual: dims[1] });
    }
    let mut m = EmbeddingMatrix::new(dims[0], dims[1], values);
    m.normalized = entry.normalized;
    Ok(m)
}

fn load_tokens(root: &Path, role: &str, entry: &TokenEntry, d_t: usize) -> Result<TokenFeatureTensor, StoreError> {
    let (dims, values) = embt::read_f32(&root.join(&entry.file))?;
    check_shape(role, &entry.shape, &dims, &["items", "positions", "d_t"])?;
    if dims[2] != d_t {
        return Err(StoreError::DimensionMismatch {
            role: role.to_string(),
            what: "d_t",
            declared: d_t,
            actual: dims[2],
        });
    }
    let (mask_dims, mask) = embt::read_u8(&root.join(&entry.mask))?;
    check_shape(&format!("{role} mask"), &dims[..2], &mask_dims, &["items", "positions"])?;
    Ok(TokenFeatureTensor::new(dims[0], dims[1], dims[2], values, mask))
}

/// Loads and fully validates the store under `root`. Read-only.
pub fn load_store(root: &Path) -> Result<EmbeddingStore, StoreError> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| StoreError::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| StoreError::Manifest(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(StoreError::Manifest(format!("unsupported format_version {}", manifest.format_version)));
    }
    let (d, d_t) = (manifest.d, manifest.d_t);
    let t = &manifest.tensors;

    let image_multivector = match &t.image_multivector {
        Some(entry) => {
            let (dims, values) = embt::read_f32(&root.join(&entry.file))?;
            check_shape("image_multivector", &entry.shape, &dims, &["items", "vectors", "d"])?;
            if dims[2] != d {
                return Err(StoreError::DimensionMismatch {
                    role: "image_multivector".into(),
                    what: "d",
                    declared: d,
                    actual: dims[2],
                });
            }
            Some(MultiVectorStack::new(dims[0], dims[1], dims[2], values))
        }
        None => None,
    };

    let store = EmbeddingStore::from_parts(StoreParts {
        meta: StoreMeta { backbone: manifest.backbone, split: manifest.split, d, d_t },
        image_embeddings: load_matrix(root, "image_embeddings", &t.image_embeddings, d)?,
        caption_embeddings: load_matrix(root, "caption_embeddings", &t.caption_embeddings, d)?,
        synthetic_caption_embeddings: load_matrix(
            root,
            "synthetic_caption_embeddings",
            &t.synthetic_caption_embeddings,
            d,
        )?,
        image_token_features: t
            .image_token_features
            .as_ref()
            .map(|e| load_tokens(root, "image_token_features", e, d_t))
            .transpose()?,
        synthetic_caption_token_features: t
            .synthetic_caption_token_features
            .as_ref()
            .map(|e| load_tokens(root, "synthetic_caption_token_features", e, d_t))
            .transpose()?,
        query_token_features: t
            .query_token_features
            .as_ref()
            .map(|e| load_tokens(root, "query_token_features", e, d_t))
            .transpose()?,
        image_multivector,
        items: manifest.items,
    });

    let report = validate_store(&store);
    if !report.is_valid() {
        return Err(StoreError::Invalid(report));
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::testutil::tiny_store;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let store = tiny_store();
        write_store(&store, dir.path()).unwrap();
        let loaded = load_store(dir.path()).unwrap();
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(loaded.image_embeddings.values()), bits(store.image_embeddings.values()));
        assert_eq!(bits(loaded.caption_embeddings.values()), bits(store.caption_embeddings.values()));
        assert_eq!(
            bits(loaded.query_token_features.as_ref().unwrap().values()),
            bits(store.query_token_features.as_ref().unwrap().values())
        );
        assert_eq!(loaded.query_token_features.unwrap().mask(), store.query_token_features.unwrap().mask());
        assert_eq!(loaded.items, store.items);
        assert_eq!(loaded.meta, store.meta);
    }

    #[test]
    fn manifest_dimension_mismatch_names_both_values() {
        let dir = tempfile::tempdir().unwrap();
        write_store(&tiny_store(), dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        v["d"] = 512.into();
        v["tensors"]["image_embeddings"]["shape"] = serde_json::json!([3, 512]);
        fs::write(&path, v.to_string()).unwrap();
        let err = load_store(dir.path()).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, StoreError::DimensionMismatch { declared: 512, actual: 4, .. }), "{msg}");
        assert!(msg.contains("512") && msg.contains('4'), "{msg}");
    }

    #[test]
    fn nan_in_image_matrix_cites_row() {
        let dir = tempfile::tempdir().unwrap();
        let mut parts = tiny_store().into_parts();
        let mut vals = parts.image_embeddings.values().to_vec();
        vals[2 * 4] = f32::NAN;
        parts.image_embeddings = EmbeddingMatrix::new(3, 4, vals);
        let store = EmbeddingStore::from_parts(parts);
        write_store(&store, dir.path()).unwrap();
        match load_store(dir.path()) {
            Err(StoreError::NonFinite { row, file, .. }) => {
                assert_eq!(row, 2);
                assert!(file.ends_with("image_embeddings.embt"));
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn dangling_index_fails_load() {
        let dir = tempfile::tempdir().unwrap();
        let mut parts = tiny_store().into_parts();
        parts.items[1].image_row = 9;
        write_store(&EmbeddingStore::from_parts(parts), dir.path()).unwrap();
        let err = load_store(dir.path()).unwrap_err();
        assert!(matches!(err, StoreError::Invalid(_)));
        assert!(err.to_string().contains("item1"));
    }
}
