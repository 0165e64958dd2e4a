//! Scratch diagnostic: across-frame feature variance and per-frame gloss
//! separability of the desk backbone at init.

use adaptsign_core::data::{augment, generate_dataset, load_split, AugmentConfig, Split};
use adaptsign_core::model::ModelConfig;
use adaptsign_core::{AdaptConfig, Regime, SignModel, SyntheticSpec, Tape, ViTConfig};
use rand::SeedableRng;

const FRAMES_PER_GLOSS: usize = 6;
const TRANSITION: usize = 2;

fn frame_gloss(t: usize, transcript: &[usize]) -> Option<usize> {
    let seg = FRAMES_PER_GLOSS + TRANSITION;
    let k = t / seg;
    if t % seg < FRAMES_PER_GLOSS && k < transcript.len() {
        Some(transcript[k])
    } else {
        None
    }
}

fn main() {
    let spec = SyntheticSpec::default();
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&spec, dir.path()).unwrap();
    let (_, samples) = load_split(dir.path(), Split::Train).unwrap();

    for regime in [Regime::Frozen, Regime::AdaptSign] {
        let cfg = ModelConfig {
            vit: ViTConfig::desk(),
            adapt: AdaptConfig::default(),
            regime,
            vocab: spec.vocab,
        };
        let model: SignModel<f32> = SignModel::build(cfg, 1).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);

        let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
        let mut ratios = Vec::new();
        for sample in &samples {
            let clip = augment(sample, &AugmentConfig::default(), false, &mut rng).unwrap();
            let frames = clip.frames_as::<f32>();
            let mut tape = Tape::new();
            let (_, out) = model.forward(&mut tape, &frames, false, false).unwrap();
            let f = tape.value(out.features);
            let (t, d) = (f.shape()[0], f.shape()[1]);

            let mut mean = vec![0.0f64; d];
            for row in f.data().chunks(d) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v as f64 / t as f64;
                }
            }
            let gmean: f64 = mean.iter().sum::<f64>() / d as f64;
            let (mut across, mut total) = (0.0f64, 0.0f64);
            for row in f.data().chunks(d) {
                for (j, &v) in row.iter().enumerate() {
                    across += (v as f64 - mean[j]).powi(2);
                    total += (v as f64 - gmean).powi(2);
                }
            }
            ratios.push(across / total);

            for (ti, row) in f.data().chunks(d).enumerate() {
                if let Some(g) = frame_gloss(ti, &clip.transcript) {
                    // center per clip so the static pattern cancels
                    let centered: Vec<f64> =
                        row.iter().zip(&mean).map(|(&v, m)| v as f64 - m).collect();
                    rows.push((g, centered));
                }
            }
        }
        let avg: f64 = ratios.iter().sum::<f64>() / ratios.len() as f64;

        let d = rows[0].1.len();
        let nglyph = spec.vocab + 1;
        let mut centroid = vec![vec![0.0f64; d]; nglyph];
        let mut count = vec![0usize; nglyph];
        for (g, v) in &rows {
            count[*g] += 1;
            for (c, x) in centroid[*g].iter_mut().zip(v) {
                *c += x;
            }
        }
        for (c, n) in centroid.iter_mut().zip(&count) {
            if *n > 0 {
                for x in c.iter_mut() {
                    *x /= *n as f64;
                }
            }
        }
        let mut hits = 0usize;
        for (g, v) in &rows {
            let mut best = (f64::INFINITY, 0usize);
            for (k, c) in centroid.iter().enumerate() {
                if count[k] == 0 {
                    continue;
                }
                let dist: f64 = c.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best.0 {
                    best = (dist, k);
                }
            }
            if best.1 == *g {
                hits += 1;
            }
        }
        println!(
            "{regime:?}: across-frame variance {avg:.4}; centroid accuracy {:.1}% over {} frames ({} glosses)",
            100.0 * hits as f64 / rows.len() as f64,
            rows.len(),
            count.iter().filter(|&&n| n > 0).count()
        );
    }
}
