//! Model persistence: a JSON manifest next to a flat weight blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub schema_version: String,
    pub config: ModelConfig,
    /// Blob path, relative to the manifest's directory.
    pub weights: String,
    pub checksum_sha256: String,
    pub tensors: Vec<TensorInfo>,
}

impl Model {
    /// Writes `<stem>.json` and `<stem>.bin` into `dir`; returns the
    /// manifest path.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let blob_name = format!("{stem}.bin");
        let blob_path = dir.join(&blob_name);
        let blob = self.weight_blob();
        fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
        let manifest = ModelManifest {
            schema_version: crate::SCHEMA_VERSION.to_string(),
            config: self.config().clone(),
            weights: blob_name,
            checksum_sha256: hex::encode(Sha256::digest(&blob)),
            tensors: self.tensor_names(),
        };
        let manifest_path = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&manifest_path, text + "\n").map_err(|e| Error::io(&manifest_path, e))?;
        Ok(manifest_path)
    }

    /// Loads a model from its manifest, verifying the blob checksum.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest: ModelManifest = crate::jsonl::read_json(manifest_path)?;
        manifest.config.validate()?;
        let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        let blob_path = base.join(&manifest.weights);
        let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        let found = hex::encode(Sha256::digest(&blob));
        if found != manifest.checksum_sha256 {
            return Err(Error::Checksum {
                path: blob_path,
                expected: manifest.checksum_sha256,
                found,
            });
        }
        if blob.len() % 4 != 0 {
            return Err(Error::Shape(format!("weight blob has {} bytes", blob.len())));
        }
        let mut values = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        let shapes = super::tensor_plan(&manifest.config);
        let expected: usize = shapes.iter().map(|(_, s, _)| s.iter().product::<usize>()).sum();
        if expected * 4 != blob.len() {
            return Err(Error::Shape(format!(
                "weight blob holds {} values, config needs {expected}",
                blob.len() / 4
            )));
        }
        let tensors = shapes
            .iter()
            .map(|(_, shape, _)| values.by_ref().take(shape.iter().product()).collect())
            .collect();
        Model::from_tensors(manifest.config, tensors)
    }
}
