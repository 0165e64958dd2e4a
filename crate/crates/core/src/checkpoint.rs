//! Checkpoint directories: a JSON manifest (config echo plus tensor index)
//! next to a raw little-endian weight blob in registration order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::elem::{Dtype, Elem};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SignModel};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    pub total_bytes: u64,
}

fn elem_bytes(dtype: Dtype) -> usize {
    match dtype {
        Dtype::F32 => 4,
        Dtype::F64 => 8,
    }
}

fn push_elem<E: Elem>(v: E, out: &mut Vec<u8>) {
    match E::DTYPE {
        Dtype::F32 => out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes()),
        Dtype::F64 => out.extend_from_slice(&v.to_f64().to_le_bytes()),
    }
}

fn read_elem<E: Elem>(bytes: &[u8]) -> E {
    match E::DTYPE {
        Dtype::F32 => E::from_f64(f32::from_le_bytes(bytes.try_into().expect("4 bytes")) as f64),
        Dtype::F64 => E::from_f64(f64::from_le_bytes(bytes.try_into().expect("8 bytes"))),
    }
}

/// Writes `manifest.json` and `weights.bin` into `dir`, creating it if
/// needed.
pub fn save<E: Elem>(dir: &Path, model: &SignModel<E>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let step = elem_bytes(E::DTYPE);
    let mut blob = Vec::new();
    let mut tensors = Vec::with_capacity(model.store.len());
    for (_, p) in model.store.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            dtype: E::DTYPE.as_str().into(),
            byte_offset: blob.len() as u64,
        });
        blob.reserve(p.value.numel() * step);
        for &v in p.value.data() {
            push_elem(v, &mut blob);
        }
    }
    let manifest = CheckpointManifest {
        config: model.cfg.clone(),
        tensors,
        total_bytes: blob.len() as u64,
    };
    let weights_path = dir.join(WEIGHTS_FILE);
    std::fs::write(&weights_path, blob)
        .map_err(|e| Error::io(weights_path.display().to_string(), e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::json(manifest_path.display().to_string(), e))?;
    std::fs::write(&manifest_path, json)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))
}

/// Reads just the manifest (cheap config inspection).
pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text =
        std::fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

/// Rebuilds the model recorded in `dir`: registers from the echoed config,
/// then overwrites every parameter with the stored bytes.
pub fn load<E: Elem>(dir: &Path) -> Result<SignModel<E>> {
    let manifest = read_manifest(dir)?;
    let mut model: SignModel<E> = SignModel::build(manifest.config.clone(), 0)?;
    if manifest.tensors.len() != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, model registers {}",
            manifest.tensors.len(),
            model.store.len()
        )));
    }
    let weights_path = dir.join(WEIGHTS_FILE);
    let blob = std::fs::read(&weights_path)
        .map_err(|e| Error::io(weights_path.display().to_string(), e))?;
    if blob.len() as u64 != manifest.total_bytes {
        return Err(Error::Checkpoint(format!(
            "weight blob is {} bytes, manifest says {}",
            blob.len(),
            manifest.total_bytes
        )));
    }
    let step = elem_bytes(E::DTYPE);
    let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
    for (entry, id) in manifest.tensors.iter().zip(ids) {
        let (name, shape) = {
            let p = model.store.get(id);
            (p.name.clone(), p.value.shape().to_vec())
        };
        if entry.name != name || entry.shape != shape {
            return Err(Error::Checkpoint(format!(
                "tensor {} ({:?}) does not match registered {} ({:?})",
                entry.name, entry.shape, name, shape
            )));
        }
        if entry.dtype != E::DTYPE.as_str() {
            return Err(Error::Incompatible(format!(
                "tensor {} stored as {}, loading as {}",
                entry.name,
                entry.dtype,
                E::DTYPE.as_str()
            )));
        }
        let numel: usize = shape.iter().product();
        let start = entry.byte_offset as usize;
        let end = start + numel * step;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {} extends to byte {end} beyond blob of {}",
                entry.name,
                blob.len()
            )));
        }
        let data: Vec<E> = blob[start..end].chunks(step).map(read_elem::<E>).collect();
        model.store.get_mut(id).value = Tensor::from_vec(&shape, data);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adaptation::AdaptConfig;
    use crate::backbone::{Regime, ViTConfig};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            vit: ViTConfig {
                layers: 2,
                dim: 8,
                heads: 2,
                patch: 4,
                image: 8,
            },
            adapt: AdaptConfig::default(),
            regime: Regime::AdaptSign,
            vocab: 3,
        }
    }

    #[test]
    fn round_trip_is_bit_exact_in_f32() {
        let dir = tempfile::tempdir().unwrap();
        let model: SignModel<f32> = SignModel::build(tiny_cfg(), 42).unwrap();
        save(dir.path(), &model).unwrap();
        let back: SignModel<f32> = load(dir.path()).unwrap();
        assert_eq!(back.cfg, model.cfg);
        for ((_, a), (_, b)) in model.store.iter().zip(back.store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.shape(), b.value.shape());
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{} drifted", a.name);
            }
        }
    }

    #[test]
    fn round_trip_is_bit_exact_in_f64() {
        let dir = tempfile::tempdir().unwrap();
        let model: SignModel<f64> = SignModel::build(tiny_cfg(), 43).unwrap();
        save(dir.path(), &model).unwrap();
        let back: SignModel<f64> = load(dir.path()).unwrap();
        for ((_, a), (_, b)) in model.store.iter().zip(back.store.iter()) {
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{} drifted", a.name);
            }
        }
    }

    #[test]
    fn truncated_weights_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model: SignModel<f32> = SignModel::build(tiny_cfg(), 44).unwrap();
        save(dir.path(), &model).unwrap();
        let weights = dir.path().join(WEIGHTS_FILE);
        let blob = std::fs::read(&weights).unwrap();
        std::fs::write(&weights, &blob[..blob.len() - 16]).unwrap();
        match load::<f32>(dir.path()) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("bytes")),
            other => panic!("expected Checkpoint error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model: SignModel<f32> = SignModel::build(tiny_cfg(), 45).unwrap();
        save(dir.path(), &model).unwrap();
        match load::<f64>(dir.path()) {
            Err(Error::Incompatible(msg)) => assert!(msg.contains("f32")),
            other => panic!("expected Incompatible, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn tampered_tensor_names_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model: SignModel<f32> = SignModel::build(tiny_cfg(), 46).unwrap();
        save(dir.path(), &model).unwrap();
        let manifest_path = dir.path().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&manifest_path)
            .unwrap()
            .replacen("backbone/cls_token", "backbone/cls_tampered", 1);
        std::fs::write(&manifest_path, text).unwrap();
        match load::<f32>(dir.path()) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("cls_tampered")),
            other => panic!("expected Checkpoint error, got {:?}", other.map(|_| ())),
        }
    }
}
