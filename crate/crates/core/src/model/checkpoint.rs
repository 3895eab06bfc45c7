//! Checkpoint directories: `manifest.json` plus one DLT1 file per parameter.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dlt;
use crate::error::{Error, Result};

use super::{Mechanism, Model, Parameterized, SscaConfig};

pub const MANIFEST: &str = "manifest.json";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub mechanism: Mechanism,
    pub config: SscaConfig,
    /// Parameter name → file name relative to the checkpoint directory.
    pub params: BTreeMap<String, String>,
}

pub fn save(model: &Model<f32>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut params = BTreeMap::new();
    for (name, tensor) in model.named_params() {
        let file = format!("{name}.dlt");
        dlt::write(&dir.join(&file), tensor)?;
        params.insert(name, file);
    }
    let manifest = CheckpointManifest {
        version: VERSION,
        mechanism: super::MultiLabelNet::mechanism(model),
        config: super::MultiLabelNet::config(model).clone(),
        params,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    if manifest.version != VERSION {
        return Err(Error::Validation(format!(
            "{}: unsupported checkpoint version {}",
            path.display(),
            manifest.version
        )));
    }
    Ok(manifest)
}

pub fn load(dir: &Path) -> Result<Model<f32>> {
    let manifest = read_manifest(dir)?;
    let mut model = Model::init(manifest.mechanism, manifest.config.clone(), 0)?;
    let expected: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    for name in manifest.params.keys() {
        if !expected.contains(name) {
            return Err(Error::Validation(format!(
                "checkpoint lists unknown parameter {name:?} for a {} model",
                manifest.mechanism
            )));
        }
    }
    for (name, slot) in model.named_params_mut() {
        let file = manifest.params.get(&name).ok_or_else(|| {
            Error::Validation(format!("checkpoint is missing parameter {name:?}"))
        })?;
        let path = dir.join(file);
        let tensor = dlt::read(&path)?;
        if tensor.shape() != slot.shape() {
            return Err(Error::Format {
                file: path,
                offset: 5,
                detail: format!(
                    "parameter {name} has shape {:?}, config implies {:?}",
                    tensor.shape(),
                    slot.shape()
                ),
            });
        }
        *slot = tensor;
    }
    Ok(model)
}

/// Loads a checkpoint and checks that it holds the expected mechanism.
pub fn load_expecting(dir: &Path, mechanism: Mechanism) -> Result<Model<f32>> {
    let manifest = read_manifest(dir)?;
    if manifest.mechanism != mechanism {
        return Err(Error::Validation(format!(
            "checkpoint {} holds a {} model, expected {mechanism}",
            dir.display(),
            manifest.mechanism
        )));
    }
    load(dir)
}
