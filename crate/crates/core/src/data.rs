//! Synthetic sign-clip corpus: each gloss renders as a distinct asymmetric
//! glyph with its own color tint and trajectory; sentences concatenate gloss
//! segments with short linear-interpolation transitions. Generation is
//! deterministic per (seed, split, index).

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Frames inserted between consecutive gloss segments.
pub const TRANSITION_FRAMES: usize = 2;

const GLYPH_GRID: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Gloss vocabulary size V; ids run 1..=V.
    pub vocab: usize,
    /// Sentence length range, inclusive.
    pub len_range: (usize, usize),
    /// Frames each gloss segment spans.
    pub frames_per_gloss: usize,
    /// Generated (pre-crop) square frame side.
    pub image: usize,
    /// Pixel noise standard deviation.
    pub noise: f64,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            vocab: 6,
            len_range: (2, 4),
            frames_per_gloss: 6,
            image: 40,
            noise: 0.02,
            train: 40,
            dev: 12,
            test: 12,
            seed: 1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::Config(format!(
                "need at least 2 glosses, got {}",
                self.vocab
            )));
        }
        if self.frames_per_gloss < 2 {
            return Err(Error::Config(format!(
                "need at least 2 frames per gloss, got {}",
                self.frames_per_gloss
            )));
        }
        let (lo, hi) = self.len_range;
        if lo < 1 || lo > hi {
            return Err(Error::Config(format!(
                "bad sentence length range [{lo}, {hi}]"
            )));
        }
        if self.image < 4 * GLYPH_GRID {
            return Err(Error::Config(format!(
                "image side {} too small for glyph rendering",
                self.image
            )));
        }
        if self.noise < 0.0 {
            return Err(Error::Config(format!("negative noise {}", self.noise)));
        }
        Ok(())
    }

    pub fn split_size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Dev => self.dev,
            Split::Test => self.test,
        }
    }

    /// Clip length for a sentence of `n` glosses.
    pub fn clip_len(&self, n: usize) -> usize {
        self.frames_per_gloss * n + TRANSITION_FRAMES * (n - 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub id: String,
    /// `[T, 3, s, s]`, pixels in `[0, 1]`.
    pub frames: Tensor<f32>,
    pub transcript: Vec<usize>,
}

impl VideoSample {
    pub fn t(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn frames_as<E: Elem>(&self) -> Tensor<E> {
        Tensor::from_vec(
            self.frames.shape(),
            self.frames.data().iter().map(|&v| E::from_f64(v as f64)).collect(),
        )
    }
}

fn sample_rng(seed: u64, split: Split, idx: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8] = match split {
        Split::Train => 1,
        Split::Dev => 2,
        Split::Test => 3,
    };
    key[9..17].copy_from_slice(&(idx as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Deterministic asymmetric 5x5 bitmap for one gloss. The corner pixels are
/// forced so no glyph equals its own mirror image.
fn glyph(gloss: usize) -> [[bool; GLYPH_GRID]; GLYPH_GRID] {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA5 ^ (gloss as u64).wrapping_mul(0x9E37_79B9));
    let mut cells = [[false; GLYPH_GRID]; GLYPH_GRID];
    for row in cells.iter_mut() {
        for cell in row.iter_mut() {
            *cell = rng.gen_bool(0.55);
        }
    }
    cells[0][0] = true;
    cells[0][GLYPH_GRID - 1] = false;
    cells[GLYPH_GRID - 1][0] = true;
    cells
}

/// Per-gloss RGB tint in `[0.35, 1.0]`.
fn tint(gloss: usize) -> [f32; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(0x71_u64 ^ (gloss as u64).wrapping_mul(0x85EB_CA6B));
    [0, 1, 2].map(|_| rng.gen_range(0.35..1.0f32))
}

/// Glyph center at `phase` in `[0,1]` along the gloss's straight trajectory.
fn trajectory(gloss: usize, phase: f64, image: usize) -> (f64, f64) {
    let s = image as f64;
    let angle = gloss as f64 * 2.399_963_229_728_653;
    let (cx, cy) = (s / 2.0, s / 2.0);
    let r = s * 0.28;
    let (sx, sy) = (cx + r * angle.cos(), cy + r * angle.sin());
    let (ex, ey) = (cx - r * angle.cos(), cy - r * angle.sin());
    (sx + (ex - sx) * phase, sy + (ey - sy) * phase)
}

/// Renders one clean (noise-free) frame of a gloss at `phase` into a
/// channel-major `[3, s, s]` buffer.
fn render_gloss_frame(gloss: usize, phase: f64, image: usize) -> Vec<f32> {
    let s = image;
    let mut out = vec![0.0f32; 3 * s * s];
    let cells = glyph(gloss);
    let color = tint(gloss);
    let (cx, cy) = trajectory(gloss, phase, image);
    let box_side = (s / 2).max(GLYPH_GRID);
    let cell_px = box_side / GLYPH_GRID;
    let x0 = (cx - box_side as f64 / 2.0).round() as isize;
    let y0 = (cy - box_side as f64 / 2.0).round() as isize;
    for (gy, row) in cells.iter().enumerate() {
        for (gx, &on) in row.iter().enumerate() {
            if !on {
                continue;
            }
            for py in 0..cell_px {
                for px in 0..cell_px {
                    let x = x0 + (gx * cell_px + px) as isize;
                    let y = y0 + (gy * cell_px + py) as isize;
                    if x < 0 || y < 0 || x >= s as isize || y >= s as isize {
                        continue;
                    }
                    for (c, &w) in color.iter().enumerate() {
                        out[c * s * s + y as usize * s + x as usize] = w;
                    }
                }
            }
        }
    }
    out
}

/// Generates one deterministic sample.
pub fn generate_sample(spec: &SyntheticSpec, split: Split, idx: usize) -> VideoSample {
    let mut rng = sample_rng(spec.seed, split, idx);
    let (lo, hi) = spec.len_range;
    let n = rng.gen_range(lo..=hi);
    let transcript: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=spec.vocab)).collect();

    let s = spec.image;
    let frame_len = 3 * s * s;
    let f_per = spec.frames_per_gloss;
    let mut frames: Vec<f32> = Vec::with_capacity(spec.clip_len(n) * frame_len);
    for (gi, &gloss) in transcript.iter().enumerate() {
        if gi > 0 {
            // Linear interpolation from the previous gloss's final frame to
            // this gloss's first frame.
            let prev_end = render_gloss_frame(transcript[gi - 1], 1.0, s);
            let next_start = render_gloss_frame(gloss, 0.0, s);
            for k in 1..=TRANSITION_FRAMES {
                let w = k as f32 / (TRANSITION_FRAMES + 1) as f32;
                frames.extend(
                    prev_end
                        .iter()
                        .zip(&next_start)
                        .map(|(&a, &b)| a * (1.0 - w) + b * w),
                );
            }
        }
        for f in 0..f_per {
            let phase = f as f64 / (f_per - 1) as f64;
            frames.extend(render_gloss_frame(gloss, phase, s));
        }
    }
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0f64, spec.noise).expect("positive sigma");
        for v in frames.iter_mut() {
            *v = (*v + normal.sample(&mut rng) as f32).clamp(0.0, 1.0);
        }
    }
    let t = spec.clip_len(n);
    VideoSample {
        id: format!("{}-{idx:04}", split.as_str()),
        frames: Tensor::from_vec(&[t, 3, s, s], frames),
        transcript,
    }
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    id: String,
    t: usize,
    transcript: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    spec: SyntheticSpec,
    samples: Vec<IndexEntry>,
}

fn split_dir(root: &Path, split: Split) -> PathBuf {
    root.join(split.as_str())
}

/// Writes all three splits under `root`: per split an `index.json` plus one
/// raw little-endian f32 frame blob per sample.
pub fn generate_dataset(spec: &SyntheticSpec, root: &Path) -> Result<()> {
    spec.validate()?;
    for split in Split::ALL {
        let dir = split_dir(root, split);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let mut entries = Vec::new();
        for idx in 0..spec.split_size(split) {
            let sample = generate_sample(spec, split, idx);
            let path = dir.join(format!("{}.bin", sample.id));
            let mut blob = Vec::with_capacity(sample.frames.numel() * 4);
            for &v in sample.frames.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            std::fs::write(&path, blob).map_err(|e| Error::io(path.display().to_string(), e))?;
            entries.push(IndexEntry {
                t: sample.t(),
                id: sample.id,
                transcript: sample.transcript,
            });
        }
        let index = IndexFile {
            spec: spec.clone(),
            samples: entries,
        };
        let path = dir.join("index.json");
        let json = serde_json::to_string_pretty(&index)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        std::fs::write(&path, json).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

/// Loads one split written by [`generate_dataset`].
pub fn load_split(root: &Path, split: Split) -> Result<(SyntheticSpec, Vec<VideoSample>)> {
    let dir = split_dir(root, split);
    let index_path = dir.join("index.json");
    let text = std::fs::read_to_string(&index_path)
        .map_err(|e| Error::io(index_path.display().to_string(), e))?;
    let index: IndexFile = serde_json::from_str(&text)
        .map_err(|e| Error::json(index_path.display().to_string(), e))?;
    let s = index.spec.image;
    let frame_len = 3 * s * s;
    let mut samples = Vec::with_capacity(index.samples.len());
    for entry in index.samples {
        let path = dir.join(format!("{}.bin", entry.id));
        let blob = std::fs::read(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let expect = entry.t * frame_len * 4;
        if blob.len() != expect {
            return Err(Error::Dataset(format!(
                "{}: expected {expect} bytes for t={}, found {}",
                path.display(),
                entry.t,
                blob.len()
            )));
        }
        let data: Vec<f32> = blob
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        samples.push(VideoSample {
            id: entry.id,
            frames: Tensor::from_vec(&[entry.t, 3, s, s], data),
            transcript: entry.transcript,
        });
    }
    Ok((index.spec, samples))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Spatial crop side fed to the model.
    pub crop: usize,
    /// Horizontal flip probability; off by default because glyph identity is
    /// chirality-sensitive.
    pub flip_p: f64,
    /// Temporal rescale factor range (nearest-frame resampling).
    pub time_scale: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop: 32,
            flip_p: 0.0,
            time_scale: (0.8, 1.2),
        }
    }
}

fn crop_frames(frames: &Tensor<f32>, x0: usize, y0: usize, crop: usize) -> Tensor<f32> {
    let shape = frames.shape();
    let (t, s) = (shape[0], shape[2]);
    let mut out = Vec::with_capacity(t * 3 * crop * crop);
    let data = frames.data();
    for ti in 0..t {
        for c in 0..3 {
            let plane = (ti * 3 + c) * s * s;
            for y in 0..crop {
                let row = plane + (y0 + y) * s + x0;
                out.extend_from_slice(&data[row..row + crop]);
            }
        }
    }
    Tensor::from_vec(&[t, 3, crop, crop], out)
}

fn flip_horizontal(frames: &Tensor<f32>) -> Tensor<f32> {
    let shape = frames.shape().to_vec();
    let s = shape[3];
    let mut out = frames.data().to_vec();
    for row in out.chunks_mut(s) {
        row.reverse();
    }
    Tensor::from_vec(&shape, out)
}

/// Nearest-frame temporal resampling to `round(T * u)` frames, endpoints
/// preserved.
fn rescale_time(frames: &Tensor<f32>, u: f64) -> Tensor<f32> {
    let shape = frames.shape();
    let (t, frame_len) = (shape[0], shape[1] * shape[2] * shape[3]);
    let t_new = ((t as f64 * u).round() as usize).max(1);
    if t_new == t {
        return frames.clone();
    }
    let mut out = Vec::with_capacity(t_new * frame_len);
    for k in 0..t_new {
        let src = if t_new == 1 {
            0
        } else {
            ((k as f64) * (t - 1) as f64 / (t_new - 1) as f64).round() as usize
        };
        out.extend_from_slice(&frames.data()[src * frame_len..(src + 1) * frame_len]);
    }
    let mut new_shape = shape.to_vec();
    new_shape[0] = t_new;
    Tensor::from_vec(&new_shape, out)
}

/// Training: random crop, optional horizontal flip, temporal rescale.
/// Evaluation: deterministic center crop only.
pub fn augment(
    sample: &VideoSample,
    cfg: &AugmentConfig,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<VideoSample> {
    let s = sample.frames.shape()[2];
    if cfg.crop > s {
        return Err(Error::Config(format!(
            "crop {} larger than frame side {s}",
            cfg.crop
        )));
    }
    let margin = s - cfg.crop;
    let frames = if training {
        let x0 = rng.gen_range(0..=margin);
        let y0 = rng.gen_range(0..=margin);
        let mut frames = crop_frames(&sample.frames, x0, y0, cfg.crop);
        if cfg.flip_p > 0.0 && rng.gen_bool(cfg.flip_p) {
            frames = flip_horizontal(&frames);
        }
        let (lo, hi) = cfg.time_scale;
        let u = if lo == hi { lo } else { rng.gen_range(lo..hi) };
        rescale_time(&frames, u)
    } else {
        crop_frames(&sample.frames, margin / 2, margin / 2, cfg.crop)
    };
    Ok(VideoSample {
        id: sample.id.clone(),
        frames,
        transcript: sample.transcript.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_lengths_follow_the_segment_formula() {
        let spec = SyntheticSpec::default();
        for split in Split::ALL {
            for idx in 0..spec.split_size(split) {
                let sample = generate_sample(&spec, split, idx);
                let n = sample.transcript.len();
                assert_eq!(sample.t(), spec.frames_per_gloss * n + 2 * (n - 1));
                assert!((14..=30).contains(&sample.t()), "t = {}", sample.t());
                assert!((2..=4).contains(&n));
                assert!(sample.transcript.iter().all(|&g| (1..=6).contains(&g)));
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_noisy_pixels_stay_in_range() {
        let spec = SyntheticSpec {
            noise: 0.3,
            ..SyntheticSpec::default()
        };
        let a = generate_sample(&spec, Split::Dev, 3);
        let b = generate_sample(&spec, Split::Dev, 3);
        assert_eq!(a, b);
        assert!(a
            .frames
            .data()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
        // Distinct index gives distinct pixels.
        let c = generate_sample(&spec, Split::Dev, 4);
        assert_ne!(a.frames.data(), c.frames.data());
    }

    #[test]
    fn written_splits_are_byte_identical_across_runs() {
        let spec = SyntheticSpec {
            train: 3,
            dev: 2,
            test: 2,
            ..SyntheticSpec::default()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_dataset(&spec, d1.path()).unwrap();
        generate_dataset(&spec, d2.path()).unwrap();
        for split in Split::ALL {
            let dir1 = d1.path().join(split.as_str());
            let dir2 = d2.path().join(split.as_str());
            let mut names: Vec<_> = std::fs::read_dir(&dir1)
                .unwrap()
                .map(|e| e.unwrap().file_name())
                .collect();
            names.sort();
            assert!(!names.is_empty());
            for name in names {
                let b1 = std::fs::read(dir1.join(&name)).unwrap();
                let b2 = std::fs::read(dir2.join(&name)).unwrap();
                assert_eq!(b1, b2, "{name:?} differs between runs");
            }
        }
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let spec = SyntheticSpec {
            train: 2,
            dev: 1,
            test: 1,
            ..SyntheticSpec::default()
        };
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&spec, dir.path()).unwrap();
        let (loaded_spec, samples) = load_split(dir.path(), Split::Train).unwrap();
        assert_eq!(loaded_spec, spec);
        assert_eq!(samples.len(), 2);
        for (idx, sample) in samples.iter().enumerate() {
            let fresh = generate_sample(&spec, Split::Train, idx);
            assert_eq!(sample, &fresh);
        }
    }

    #[test]
    fn glyphs_are_distinct_and_chirality_sensitive() {
        let frames: Vec<Vec<f32>> = (1..=6).map(|g| render_gloss_frame(g, 0.5, 40)).collect();
        for i in 0..frames.len() {
            for j in i + 1..frames.len() {
                assert_ne!(frames[i], frames[j], "glosses {} and {} render alike", i + 1, j + 1);
            }
        }
        for (i, frame) in frames.iter().enumerate() {
            let t = Tensor::from_vec(&[1, 3, 40, 40], frame.clone());
            let flipped = flip_horizontal(&t);
            assert_ne!(
                flipped.data(),
                frame.as_slice(),
                "gloss {} is mirror-symmetric",
                i + 1
            );
        }
    }

    #[test]
    fn evaluation_augmentation_is_deterministic_center_crop() {
        let spec = SyntheticSpec::default();
        let sample = generate_sample(&spec, Split::Test, 0);
        let cfg = AugmentConfig::default();
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        let a = augment(&sample, &cfg, false, &mut r1).unwrap();
        let b = augment(&sample, &cfg, false, &mut r2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.frames.shape(), &[sample.t(), 3, 32, 32]);
        assert_eq!(a.transcript, sample.transcript);
    }

    #[test]
    fn temporal_rescaling_rounds_the_frame_count() {
        let frames = Tensor::from_vec(
            &[20, 1, 1, 1],
            (0..20).map(|t| t as f32).collect::<Vec<_>>(),
        );
        let longer = rescale_time(&frames, 1.2);
        assert_eq!(longer.shape()[0], 24);
        assert_eq!(longer.data()[0], 0.0);
        assert_eq!(longer.data()[23], 19.0);
        let shorter = rescale_time(&frames, 0.8);
        assert_eq!(shorter.shape()[0], 16);
        assert_eq!(shorter.data()[0], 0.0);
        assert_eq!(shorter.data()[15], 19.0);
    }

    #[test]
    fn training_augmentation_crops_and_optionally_flips() {
        let spec = SyntheticSpec::default();
        let sample = generate_sample(&spec, Split::Train, 1);
        let cfg = AugmentConfig {
            time_scale: (1.0, 1.0),
            ..AugmentConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let plain = augment(&sample, &cfg, true, &mut rng).unwrap();
        assert_eq!(plain.frames.shape(), &[sample.t(), 3, 32, 32]);

        let flip_cfg = AugmentConfig {
            flip_p: 1.0,
            time_scale: (1.0, 1.0),
            ..AugmentConfig::default()
        };
        let mut r1 = ChaCha8Rng::seed_from_u64(4);
        let mut r2 = ChaCha8Rng::seed_from_u64(4);
        let flipped = augment(&sample, &flip_cfg, true, &mut r1).unwrap();
        let unflipped = augment(&sample, &cfg, true, &mut r2).unwrap();
        assert_eq!(
            flip_horizontal(&flipped.frames).data(),
            unflipped.frames.data()
        );
    }

    #[test]
    fn oversized_crop_is_a_config_error() {
        let spec = SyntheticSpec::default();
        let sample = generate_sample(&spec, Split::Train, 0);
        let cfg = AugmentConfig {
            crop: 48,
            ..AugmentConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            augment(&sample, &cfg, true, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn bad_specs_are_rejected() {
        let mut spec = SyntheticSpec::default();
        spec.vocab = 1;
        assert!(spec.validate().is_err());
        let mut spec = SyntheticSpec::default();
        spec.len_range = (3, 2);
        assert!(spec.validate().is_err());
        let mut spec = SyntheticSpec::default();
        spec.frames_per_gloss = 1;
        assert!(spec.validate().is_err());
    }
}
