//! Attention-map export: spatial class-token attention per frame and
//! cross-frame gate maps, written as binary PGM images plus CSVs of the raw
//! values.

use std::path::{Path, PathBuf};

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::model::SignModel;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Writes an 8-bit binary PGM. With `normalize` the values are scaled so the
/// image maximum maps to white; otherwise values are treated as already lying
/// in `[0, 1]`.
pub fn write_pgm(
    path: &Path,
    width: usize,
    height: usize,
    values: &[f64],
    normalize: bool,
) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::DimensionMismatch {
            op: "write_pgm",
            lhs: vec![values.len()],
            rhs: vec![height, width],
        });
    }
    let peak = values.iter().cloned().fold(0.0f64, f64::max);
    let scale = if normalize && peak > 0.0 { 1.0 / peak } else { 1.0 };
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(
        values
            .iter()
            .map(|&v| ((v * scale).clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Raw values behind the written images, kept for assertions and reuse.
pub struct AttentionDump {
    /// Per frame: head-averaged class-token attention over the `n` patch
    /// keys (prefix and class-key columns excluded), row-major on the patch
    /// grid.
    pub spatial: Vec<Vec<f64>>,
    /// Patch grid side, so each spatial map is `side x side`.
    pub side: usize,
    /// Per frame: cross-frame gate map, `neighborhood x n` row-major.
    /// Empty when the model has no cross-frame module.
    pub gates: Vec<Tensor<f64>>,
    pub files: Vec<PathBuf>,
}

/// Runs one clip through the model with traces enabled and writes
/// `spatial_f*.pgm`, `crossframe_f*.pgm`, `spatial.csv`, and
/// `crossframe.csv` under `out_dir`.
pub fn dump_attention<E: Elem>(
    model: &SignModel<E>,
    frames: &Tensor<E>,
    out_dir: &Path,
) -> Result<AttentionDump> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut tape = Tape::new();
    let (_, out) = model.forward(&mut tape, frames, false, true)?;
    let trace = out
        .spatial_attention
        .ok_or_else(|| Error::Config("forward pass produced no attention trace".into()))?;
    let heads = trace.attn.len();
    if heads == 0 {
        return Err(Error::Config("attention trace is empty".into()));
    }
    let shape = trace.attn[0].shape().to_vec();
    let (t_total, tokens, keys) = (shape[0], shape[1], shape[2]);
    let prefix = keys - tokens;
    let n = tokens - 1;
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n {
        return Err(Error::Config(format!(
            "{n} patches do not form a square grid"
        )));
    }

    let mut files = Vec::new();
    let mut spatial = Vec::with_capacity(t_total);
    let mut spatial_csv = String::from("frame,patch_row,patch_col,value\n");
    for t in 0..t_total {
        let mut row = vec![0.0f64; keys];
        for head in &trace.attn {
            let cls_row = &head.data()[t * tokens * keys..t * tokens * keys + keys];
            for (slot, v) in row.iter_mut().zip(cls_row) {
                *slot += v.to_f64();
            }
        }
        for slot in row.iter_mut() {
            *slot /= heads as f64;
        }
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "attention row for frame {t} sums to {total}, not 1"
            )));
        }
        let map: Vec<f64> = row[prefix + 1..].to_vec();
        for (i, &v) in map.iter().enumerate() {
            spatial_csv.push_str(&format!("{t},{},{},{v}\n", i / side, i % side));
        }
        let path = out_dir.join(format!("spatial_f{t:03}.pgm"));
        write_pgm(&path, side, side, &map, true)?;
        files.push(path);
        spatial.push(map);
    }
    let csv_path = out_dir.join("spatial.csv");
    std::fs::write(&csv_path, spatial_csv)
        .map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    files.push(csv_path);

    let mut gates = Vec::new();
    if let Some(maps) = out.cross_frame_maps {
        let mut gate_csv = String::from("frame,neighbor,patch,value\n");
        for (t, map) in maps.iter().enumerate() {
            let (rows, cols) = (map.shape()[0], map.shape()[1]);
            let values: Vec<f64> = map.data().iter().map(|v| v.to_f64()).collect();
            // Sigmoid outputs live in (0, 1) mathematically; trained f32
            // models may round to the closed endpoints.
            if let Some(&v) = values.iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::Config(format!(
                    "gate value {v} for frame {t} escapes [0, 1]"
                )));
            }
            for (i, &v) in values.iter().enumerate() {
                gate_csv.push_str(&format!("{t},{},{},{v}\n", i / cols, i % cols));
            }
            let path = out_dir.join(format!("crossframe_f{t:03}.pgm"));
            write_pgm(&path, cols, rows, &values, false)?;
            files.push(path);
            gates.push(Tensor::from_vec(&[rows, cols], values));
        }
        let csv_path = out_dir.join("crossframe.csv");
        std::fs::write(&csv_path, gate_csv)
            .map_err(|e| Error::io(csv_path.display().to_string(), e))?;
        files.push(csv_path);
    }

    Ok(AttentionDump {
        spatial,
        side,
        gates,
        files,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adaptation::AdaptConfig;
    use crate::backbone::{Regime, ViTConfig};
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_frames(t: usize, s: usize) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        Tensor::from_vec(
            &[t, 3, s, s],
            (0..t * 3 * s * s).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
    }

    fn desk_model(regime: Regime) -> SignModel<f32> {
        let cfg = ModelConfig {
            vit: ViTConfig::desk(),
            adapt: AdaptConfig::default(),
            regime,
            vocab: 4,
        };
        SignModel::build(cfg, 3).unwrap()
    }

    #[test]
    fn pgm_bytes_encode_header_then_scaled_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        write_pgm(&path, 2, 2, &[0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0], false).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..9], b"P5\n2 2\n25");
        assert_eq!(&bytes[bytes.len() - 4..], &[0, 85, 170, 255]);

        // Normalization maps the image maximum to white.
        write_pgm(&path, 2, 1, &[0.1, 0.2], true).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[bytes.len() - 2..], &[128, 255]);
    }

    #[test]
    fn pgm_rejects_mismatched_value_counts() {
        let dir = tempfile::tempdir().unwrap();
        assert!(write_pgm(&dir.path().join("b.pgm"), 3, 2, &[0.0; 5], false).is_err());
    }

    #[test]
    fn adaptation_dump_writes_spatial_and_gate_maps() {
        let model = desk_model(Regime::AdaptSign);
        let t = 6;
        let frames = random_frames(t, model.cfg.vit.image);
        let dir = tempfile::tempdir().unwrap();
        let dump = dump_attention(&model, &frames, dir.path()).unwrap();

        assert_eq!(dump.spatial.len(), t);
        assert_eq!(dump.side * dump.side, (model.cfg.vit.tokens() - 1));
        for map in &dump.spatial {
            assert_eq!(map.len(), dump.side * dump.side);
            // Patch mass is part of a softmax row, so it cannot exceed 1.
            let mass: f64 = map.iter().sum();
            assert!(mass > 0.0 && mass <= 1.0 + 1e-9, "patch mass {mass}");
        }

        let tau = model.cfg.adapt.temporal_radius;
        assert_eq!(dump.gates.len(), t);
        let interior = &dump.gates[t / 2];
        assert_eq!(interior.shape(), &[(2 * tau + 1).min(t), (model.cfg.vit.tokens() - 1)]);
        for g in dump.gates.iter().flat_map(|m| m.data()) {
            assert!((0.0..1.0).contains(g) && *g > 0.0, "gate {g} not in (0,1)");
        }

        for name in ["spatial_f000.pgm", "crossframe_f005.pgm", "spatial.csv", "crossframe.csv"] {
            assert!(dir.path().join(name).exists(), "{name} missing");
        }
        let csv = std::fs::read_to_string(dir.path().join("crossframe.csv")).unwrap();
        assert!(csv.starts_with("frame,neighbor,patch,value\n"));
        assert_eq!(csv.lines().count() - 1, dump.gates.iter().map(|m| m.numel()).sum::<usize>());
    }

    #[test]
    fn frozen_dump_has_spatial_maps_only() {
        let model = desk_model(Regime::Frozen);
        let frames = random_frames(5, model.cfg.vit.image);
        let dir = tempfile::tempdir().unwrap();
        let dump = dump_attention(&model, &frames, dir.path()).unwrap();
        assert_eq!(dump.spatial.len(), 5);
        assert!(dump.gates.is_empty());
        assert!(!dir.path().join("crossframe.csv").exists());
    }
}
