//! Checkpoint directory: one EMBT file per parameter tensor, a JSON index of
//! names, files and shapes, and the model configuration.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AfsConfig, AfsError, AfsModel, AfsParams};
use crate::store::{embt, StoreError};
use crate::tensor::Tensor;

pub const PARAMS_FILE: &str = "params.json";
pub const AFS_CONFIG_FILE: &str = "afs_config.json";

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    file: String,
    shape: [usize; 2],
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamIndex {
    format_version: u32,
    params: Vec<ParamEntry>,
}

fn json_err(path: &Path, e: serde_json::Error) -> AfsError {
    AfsError::Checkpoint(format!("{}: {e}", path.display()))
}

pub fn save_checkpoint(model: &AfsModel, dir: &Path) -> Result<(), AfsError> {
    fs::create_dir_all(dir).map_err(|e| StoreError::io(dir, e))?;
    let mut params = Vec::with_capacity(model.params.len());
    for (i, (name, t)) in model.params.entries().iter().enumerate() {
        let file = format!("p{i:03}_{}.embt", name.replace('.', "_"));
        embt::write_f32(&dir.join(&file), &[t.rows(), t.cols()], t.data())?;
        params.push(ParamEntry { name: name.clone(), file, shape: [t.rows(), t.cols()] });
    }
    let index = ParamIndex { format_version: 1, params };
    let write_json = |file: &str, body: String| -> Result<(), AfsError> {
        let path = dir.join(file);
        fs::write(&path, body).map_err(|e| StoreError::io(&path, e).into())
    };
    write_json(PARAMS_FILE, serde_json::to_string_pretty(&index).map_err(|e| json_err(dir, e))?)?;
    write_json(AFS_CONFIG_FILE, serde_json::to_string_pretty(&model.config).map_err(|e| json_err(dir, e))?)
}

pub fn load_checkpoint(dir: &Path) -> Result<AfsModel, AfsError> {
    let read = |file: &str| -> Result<String, AfsError> {
        let path = dir.join(file);
        fs::read_to_string(&path).map_err(|e| StoreError::io(&path, e).into())
    };
    let config: AfsConfig =
        serde_json::from_str(&read(AFS_CONFIG_FILE)?).map_err(|e| json_err(&dir.join(AFS_CONFIG_FILE), e))?;
    let index: ParamIndex =
        serde_json::from_str(&read(PARAMS_FILE)?).map_err(|e| json_err(&dir.join(PARAMS_FILE), e))?;
    if index.format_version != 1 {
        return Err(AfsError::Checkpoint(format!("unsupported format version {}", index.format_version)));
    }
    let mut entries = Vec::with_capacity(index.params.len());
    for p in index.params {
        let (dims, values) = embt::read_f32(&dir.join(&p.file))?;
        if dims != p.shape {
            return Err(AfsError::Checkpoint(format!("{}: shape {dims:?} but index says {:?}", p.file, p.shape)));
        }
        entries.push((p.name, Tensor::new(p.shape[0], p.shape[1], values)));
    }
    AfsModel::new(config, AfsParams::from_entries(entries))
}
