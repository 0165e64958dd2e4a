//! Scratch: is the lattice input-dependent? Same model, two different clips
//! of equal length; compare lattices and stage-by-stage feature deltas.

use adaptsign_core::model::ModelConfig;
use adaptsign_core::{AdaptConfig, Regime, SignModel, Tape, Tensor, ViTConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn frames(seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(
        &[16, 3, 32, 32],
        (0..16 * 3 * 32 * 32).map(|_| rng.gen_range(0.0..1.0)).collect(),
    )
}

fn main() {
    let cfg = ModelConfig {
        vit: ViTConfig::desk(),
        adapt: AdaptConfig::default(),
        regime: Regime::AdaptSign,
        vocab: 6,
    };
    let model: SignModel<f32> = SignModel::build(cfg, 1).unwrap();
    let a = frames(10);
    let b = frames(20);
    let mut ta = Tape::new();
    let (_, oa) = model.forward(&mut ta, &a, false, false).unwrap();
    let mut tb = Tape::new();
    let (_, ob) = model.forward(&mut tb, &b, false, false).unwrap();

    let fa = ta.value(oa.features);
    let fb = tb.value(ob.features);
    let df: f32 = fa.data().iter().zip(fb.data()).map(|(x, y)| (x - y).abs()).sum::<f32>()
        / fa.numel() as f32;
    let la = ta.value(oa.lattice);
    let lb = tb.value(ob.lattice);
    let dl: f32 = la.data().iter().zip(lb.data()).map(|(x, y)| (x - y).abs()).sum::<f32>()
        / la.numel() as f32;
    let fmag: f32 = fa.data().iter().map(|x| x.abs()).sum::<f32>() / fa.numel() as f32;
    let lmag: f32 = la.data().iter().map(|x| x.abs()).sum::<f32>() / la.numel() as f32;
    println!("mean |feature| {fmag:.4}, mean |feature delta| {df:.4}");
    println!("mean |lattice| {lmag:.4}, mean |lattice delta| {dl:.6}");
    println!("lattice rows a: {:?}", &la.data()[..7]);
    println!("lattice rows b: {:?}", &lb.data()[..7]);
}
