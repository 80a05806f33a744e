//! Parameter checkpoints: a directory with one `.etz` file per named tensor
//! and a `manifest.json` listing names, files, shapes and the config.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EcaBlockParams, EcaConfig};
use crate::error::{Error, Result};
use crate::tensor::{tensor_read, tensor_write, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT: &str = "epidiff-checkpoint-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub config: serde_json::Value,
    pub tensors: Vec<ManifestEntry>,
}

fn file_name(name: &str) -> Result<String> {
    if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || "._-".contains(c)) {
        return Err(Error::InvalidArgument(format!("bad tensor name {name:?}")));
    }
    Ok(format!("{name}.etz"))
}

pub fn save_checkpoint(dir: impl AsRef<Path>, tensors: &[(String, &Tensor)], config: serde_json::Value) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let file = file_name(name)?;
        if entries.iter().any(|e: &ManifestEntry| e.name == *name) {
            return Err(Error::InvalidArgument(format!("duplicate tensor name {name}")));
        }
        tensor_write(t, dir.join(&file))?;
        entries.push(ManifestEntry {
            name: name.clone(),
            file,
            shape: t.shape().to_vec(),
        });
    }
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        config,
        tensors: entries,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Reads every listed tensor; each file's shape must match the manifest.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(CheckpointManifest, BTreeMap<String, Tensor>)> {
    let dir = dir.as_ref();
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if manifest.format != FORMAT {
        return Err(Error::Format(format!("unknown checkpoint format {:?}", manifest.format)));
    }
    let mut tensors = BTreeMap::new();
    for e in &manifest.tensors {
        if e.file != file_name(&e.name)? {
            return Err(Error::Format(format!("unexpected file {:?} for {}", e.file, e.name)));
        }
        let t = tensor_read(dir.join(&e.file))?;
        if t.shape() != e.shape.as_slice() {
            return Err(Error::shape("checkpoint tensor", t.shape(), &e.shape));
        }
        tensors.insert(e.name.clone(), t);
    }
    Ok((manifest, tensors))
}

/// Overwrites each template tensor with the loaded one of the same name and
/// shape; every template name must be present.
pub fn fill_named(template: Vec<(String, &mut Tensor)>, loaded: &BTreeMap<String, Tensor>) -> Result<()> {
    for (name, slot) in template {
        let t = loaded
            .get(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
        if t.shape() != slot.shape() {
            return Err(Error::shape("checkpoint tensor", t.shape(), slot.shape()));
        }
        *slot = t.clone();
    }
    Ok(())
}

impl EcaBlockParams {
    pub fn save(&self, dir: impl AsRef<Path>, cfg: &EcaConfig) -> Result<()> {
        save_checkpoint(dir, &self.named_tensors(), serde_json::to_value(cfg)?)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(EcaConfig, Self)> {
        let (manifest, tensors) = load_checkpoint(dir)?;
        let cfg: EcaConfig = serde_json::from_value(manifest.config)?;
        cfg.validate()?;
        let mut params = Self::zeros(&cfg);
        fill_named(params.named_tensors_mut(), &tensors)?;
        Ok((cfg, params))
    }
}

#[cfg(test)]
mod tests {
    use super::super::init_params;
    use super::*;
    use crate::tensor::DeterministicRng;

    #[test]
    fn round_trip_preserves_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = EcaConfig::new(4, 16, 8);
        let params = init_params(&mut DeterministicRng::new(5), &cfg).unwrap();
        params.save(dir.path(), &cfg).unwrap();
        let (cfg2, back) = EcaBlockParams::load(dir.path()).unwrap();
        assert_eq!(cfg2, cfg);
        for ((n, a), (_, b)) in params.named_tensors().into_iter().zip(back.named_tensors()) {
            assert_eq!(a.shape(), b.shape(), "{n}");
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| (*x as f32 as f64).to_bits() == y.to_bits()));
        }
        assert!(dir.path().join("cross.q.weight.etz").exists());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = EcaConfig::new(4, 16, 8);
        let params = init_params(&mut DeterministicRng::new(5), &cfg).unwrap();
        params.save(dir.path(), &cfg).unwrap();
        tensor_write(&Tensor::zeros(&[3, 3]), dir.path().join("fusion.weight.etz")).unwrap();
        assert!(EcaBlockParams::load(dir.path()).is_err());

        params.save(dir.path(), &cfg).unwrap();
        let mut other = cfg;
        other.channels = 4;
        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        let mut m: CheckpointManifest = serde_json::from_str(&text).unwrap();
        m.config = serde_json::to_value(other).unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), serde_json::to_string(&m).unwrap()).unwrap();
        assert!(EcaBlockParams::load(dir.path()).is_err());
    }

    #[test]
    fn missing_manifest_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
