use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{MdtConfig, MdtModel, ModelError};
use crate::earliness::PrefixSpec;
use crate::tensor::Tensor;
use crate::train::TrainConfig;

const FORMAT: &str = "earlyflow-mdt-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// JSON side of a checkpoint. Parameter values live in the blob file,
/// little-endian `f64`, concatenated in `params` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub config: MdtConfig,
    pub seed: u64,
    pub classes: Vec<String>,
    pub prefix: Option<String>,
    pub train: Option<TrainConfig>,
    pub blob: String,
    pub params: Vec<ParamEntry>,
}

/// A trained model plus what is needed to evaluate it again.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: MdtModel,
    pub classes: Vec<String>,
    pub prefix: Option<PrefixSpec>,
    pub train: Option<TrainConfig>,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `path` (JSON) and a sibling `.bin` blob.
pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<(), ModelError> {
    let path = path.as_ref();
    let blob = blob_path(path);
    let blob_name = blob
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| {
            ModelError::Checkpoint(format!("cannot derive blob name from {}", path.display()))
        })?
        .to_string();
    let m = &ckpt.model;
    let manifest = CheckpointManifest {
        format: FORMAT.to_string(),
        config: m.config().clone(),
        seed: m.seed(),
        classes: ckpt.classes.clone(),
        prefix: ckpt.prefix.map(|p| p.to_string()),
        train: ckpt.train.clone(),
        blob: blob_name,
        params: m
            .param_names()
            .iter()
            .zip(m.params())
            .map(|(name, t)| ParamEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let mut bytes = Vec::with_capacity(8 * m.num_scalars());
    for t in m.params() {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    json.push('\n');
    fs::write(path, json)?;
    fs::write(blob, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, ModelError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(ModelError::Checkpoint(format!(
            "unknown format {:?}",
            manifest.format
        )));
    }
    let blob_file = path.parent().unwrap_or(Path::new(".")).join(&manifest.blob);
    let bytes = fs::read(blob_file)?;
    let expected: usize = manifest
        .params
        .iter()
        .map(|p| p.shape.iter().product::<usize>())
        .sum();
    if bytes.len() != 8 * expected {
        return Err(ModelError::Checkpoint(format!(
            "blob holds {} bytes, expected {}",
            bytes.len(),
            8 * expected
        )));
    }
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let mut params = Vec::with_capacity(manifest.params.len());
    for p in &manifest.params {
        let n = p.shape.iter().product();
        params.push(Tensor::new(&p.shape, values.by_ref().take(n).collect())?);
    }
    let model = MdtModel::from_params(manifest.config, manifest.seed, params)?;
    for (entry, name) in manifest.params.iter().zip(model.param_names()) {
        if &entry.name != name {
            return Err(ModelError::Checkpoint(format!(
                "parameter {name} stored as {}",
                entry.name
            )));
        }
    }
    if manifest.classes.len() != model.config().n_classes {
        return Err(ModelError::Checkpoint(
            "class list does not match n_classes".into(),
        ));
    }
    let prefix = manifest
        .prefix
        .map(|p| {
            p.parse::<PrefixSpec>()
                .map_err(|e| ModelError::Checkpoint(e.to_string()))
        })
        .transpose()?;
    Ok(Checkpoint {
        model,
        classes: manifest.classes,
        prefix,
        train: manifest.train,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = MdtConfig {
            d_in: 2,
            d_model: 8,
            h: 2,
            n_blocks: 2,
            d_ff: 8,
            max_len: 16,
            ..MdtConfig::default()
        };
        let ckpt = Checkpoint {
            model: MdtModel::new(cfg, 11).unwrap(),
            classes: vec!["a".into(), "b".into()],
            prefix: Some(PrefixSpec::ByCount(4)),
            train: Some(TrainConfig::default()),
        };
        let path = dir.path().join("model.json");
        save_checkpoint(&path, &ckpt).unwrap();
        assert!(dir.path().join("model.bin").exists());
        assert_eq!(load_checkpoint(&path).unwrap(), ckpt);
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = MdtConfig {
            d_in: 2,
            d_model: 4,
            h: 1,
            n_blocks: 1,
            d_ff: 4,
            max_len: 4,
            ..MdtConfig::default()
        };
        let ckpt = Checkpoint {
            model: MdtModel::new(cfg, 1).unwrap(),
            classes: vec!["a".into(), "b".into()],
            prefix: None,
            train: None,
        };
        let path = dir.path().join("m.json");
        save_checkpoint(&path, &ckpt).unwrap();
        let blob = dir.path().join("m.bin");
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(ModelError::Checkpoint(_))
        ));
    }
}
