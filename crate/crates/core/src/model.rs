//! Full model assembly: the transformer backbone, the optional adaptation
//! stack, frame-feature fusion, and the temporal head producing the per-clip
//! log-probability lattice.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::{
    cross_frame_attention, fuse_frame_features, multiscale_init, multiscale_output,
    multiscale_step, register_adaptation, AdaptConfig, AdaptIds,
};
use crate::backbone::{
    backbone_forward, patch_rows, register_backbone, set_trainability, BackboneIds, BlockHooks,
    BlockTrace, Regime, ViTConfig,
};
use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::seq::{register_seq, seq_head_forward, SeqConfig, SeqIds};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vit: ViTConfig,
    pub adapt: AdaptConfig,
    pub regime: Regime,
    /// Gloss vocabulary size, excluding blank.
    pub vocab: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        if self.regime == Regime::AdaptSign {
            self.adapt.validate()?;
        }
        self.seq_config().validate()
    }

    pub fn seq_config(&self) -> SeqConfig {
        SeqConfig {
            dim: self.vit.dim,
            vocab: self.vocab,
        }
    }
}

/// One clip's forward products.
pub struct ModelOutput<E: Elem> {
    /// `[T', vocab+1]` per-step log-probabilities, blank at index 0.
    pub lattice: Var,
    /// `[T, d]` fused frame features entering the sequence head.
    pub features: Var,
    /// Last-block attention weights when traces were requested.
    pub spatial_attention: Option<BlockTrace<E>>,
    /// Per-frame gate maps from cross-frame aggregation when traces were
    /// requested (adaptation regime only).
    pub cross_frame_maps: Option<Vec<Tensor<E>>>,
}

/// A registered model: parameters plus the ids to bind them onto a tape.
pub struct SignModel<E: Elem> {
    pub cfg: ModelConfig,
    pub store: ParamStore<E>,
    pub backbone: BackboneIds,
    /// Present exactly when the regime trains adaptation modules.
    pub adaptation: Option<AdaptIds>,
    pub seq: SeqIds,
}

impl<E: Elem> SignModel<E> {
    /// Registers all components from one seed and applies the regime's
    /// trainability mask.
    pub fn build(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = register_backbone(&mut store, &cfg.vit, &mut rng)?;
        let adaptation = if cfg.regime == Regime::AdaptSign {
            Some(register_adaptation(
                &mut store,
                cfg.vit.layers,
                cfg.vit.dim,
                &cfg.adapt,
                &mut rng,
            )?)
        } else {
            None
        };
        let seq = register_seq(&mut store, &cfg.seq_config(), &mut rng)?;
        set_trainability(&mut store, &cfg.vit, cfg.regime)?;
        Ok(SignModel {
            cfg,
            store,
            backbone,
            adaptation,
            seq,
        })
    }

    /// Forward pass with an existing binding (training keeps the binding to
    /// collect gradients afterwards).
    pub fn forward_bound(
        &self,
        tape: &mut Tape<E>,
        bound: &Bound,
        frames: &Tensor<E>,
        want_traces: bool,
    ) -> Result<ModelOutput<E>> {
        let vit = &self.cfg.vit;
        let bb = self.backbone.bind(bound);
        let (features, spatial_attention, cross_frame_maps) = match &self.adaptation {
            Some(ids) => {
                let ad = ids.bind(bound);
                let hooks: Vec<Option<BlockHooks>> = (0..vit.layers)
                    .map(|l| {
                        Some(BlockHooks {
                            msa_adapter: Some(&ad.adapters[l].0),
                            ffn_adapter: Some(&ad.adapters[l].1),
                            prefix: ad.prefix[l],
                        })
                    })
                    .collect();
                let out = backbone_forward(tape, vit, &bb, frames, &hooks, want_traces)?;
                let t = frames.shape()[0];
                let mut x_mul = multiscale_init(tape, &ad.multiscale, t);
                for (layer_vars, z_l) in ad.multiscale.layers.iter().zip(&out.layers) {
                    x_mul = multiscale_step(tape, x_mul, *z_l, layer_vars);
                }
                let ms_feat = multiscale_output(tape, &ad.multiscale, x_mul);
                let patches = patch_rows(tape, out.final_tokens);
                let mut maps = want_traces.then(Vec::new);
                let cf_feat = cross_frame_attention(
                    tape,
                    out.cls,
                    patches,
                    &ad.cross_frame,
                    self.cfg.adapt.temporal_radius,
                    self.cfg.adapt.bidirectional,
                    maps.as_mut(),
                );
                let fused = fuse_frame_features(tape, cf_feat, ms_feat)?;
                (fused, out.trace, maps)
            }
            None => {
                let out = backbone_forward(tape, vit, &bb, frames, &[], want_traces)?;
                (out.cls, out.trace, None)
            }
        };
        let sq = self.seq.bind(bound);
        let lattice = seq_head_forward(tape, &sq, features)?;
        Ok(ModelOutput {
            lattice,
            features,
            spatial_attention,
            cross_frame_maps,
        })
    }

    /// Binds and runs in one call; `with_grad` controls whether trainable
    /// parameters become differentiable leaves.
    pub fn forward(
        &self,
        tape: &mut Tape<E>,
        frames: &Tensor<E>,
        with_grad: bool,
        want_traces: bool,
    ) -> Result<(Bound, ModelOutput<E>)> {
        let bound = Bound::bind(&self.store, tape, with_grad);
        let out = self.forward_bound(tape, &bound, frames, want_traces)?;
        Ok((bound, out))
    }

    /// Copies every parameter value from another model with the same
    /// registration layout.
    pub fn load_values_from(&mut self, other: &ParamStore<E>) -> Result<()> {
        if other.len() != self.store.len() {
            return Err(Error::Incompatible(format!(
                "parameter count mismatch: {} vs {}",
                other.len(),
                self.store.len()
            )));
        }
        let ids: Vec<_> = self.store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let (name, shape) = {
                let p = self.store.get(id);
                (p.name.clone(), p.value.shape().to_vec())
            };
            let src = other.get(id);
            if src.name != name || src.value.shape() != shape.as_slice() {
                return Err(Error::Incompatible(format!(
                    "parameter {} does not match the checkpoint layout",
                    name
                )));
            }
            self.store.get_mut(id).value = src.value.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adaptation::neutralize_cross_frame;
    use crate::cost::{count_flops, count_params};
    use crate::ctc::{ctc_forward_loss, CtcOutcome};
    use crate::gradcheck::{grad_check, GradCheckConfig};
    use crate::params::ParamId;
    use rand::Rng;

    fn desk_cfg(regime: Regime) -> ModelConfig {
        ModelConfig {
            vit: ViTConfig::desk(),
            adapt: AdaptConfig::default(),
            regime,
            vocab: 6,
        }
    }

    fn random_frames<El: Elem>(t: usize, s: usize, seed: u64) -> Tensor<El> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(
            &[t, 3, s, s],
            (0..t * 3 * s * s)
                .map(|_| El::from_f64(rng.gen_range(0.0..1.0)))
                .collect(),
        )
    }

    #[test]
    fn neutral_adaptation_reproduces_frozen_features_bit_for_bit() {
        let mut cfg = desk_cfg(Regime::AdaptSign);
        cfg.adapt.prefix_len = 0;
        let mut model: SignModel<f32> = SignModel::build(cfg, 7).unwrap();
        let ids = model.adaptation.as_ref().unwrap().cross_frame.clone();
        neutralize_cross_frame(&mut model.store, &ids);

        let frozen: SignModel<f32> = SignModel::build(desk_cfg(Regime::Frozen), 7).unwrap();

        let frames: Tensor<f32> = random_frames(4, 32, 1);
        let mut tape = Tape::new();
        let (_, adapted) = model.forward(&mut tape, &frames, false, false).unwrap();
        let mut tape_f = Tape::new();
        let (_, plain) = frozen.forward(&mut tape_f, &frames, false, false).unwrap();

        let a = tape.value(adapted.features);
        let b = tape_f.value(plain.features);
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn lattice_has_head_shape_and_normalized_rows() {
        let model: SignModel<f64> = SignModel::build(desk_cfg(Regime::AdaptSign), 3).unwrap();
        let frames = random_frames(6, 32, 2);
        let mut tape = Tape::new();
        let (_, out) = model.forward(&mut tape, &frames, false, false).unwrap();
        let lv = tape.value(out.lattice);
        assert_eq!(lv.shape(), &[1, 7]);
        for row in lv.data().chunks(7) {
            let mass: f64 = row.iter().map(|&lp| lp.exp()).sum();
            assert!((mass - 1.0).abs() < 1e-6);
        }
        assert_eq!(tape.value(out.features).shape(), &[6, 64]);
    }

    #[test]
    fn same_seed_builds_identical_forwards() {
        let frames: Tensor<f32> = random_frames(4, 32, 3);
        let run = || -> Vec<u32> {
            let model: SignModel<f32> =
                SignModel::build(desk_cfg(Regime::AdaptSign), 11).unwrap();
            let mut tape = Tape::new();
            let (_, out) = model.forward(&mut tape, &frames, false, false).unwrap();
            tape.value(out.lattice).data().iter().map(|v| v.to_bits()).collect()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn every_regime_runs_and_masks_trainability_correctly() {
        let frames: Tensor<f32> = random_frames(4, 32, 4);
        for regime in [
            Regime::Frozen,
            Regime::Full,
            Regime::Partial(2),
            Regime::AdaptSign,
        ] {
            let model: SignModel<f32> = SignModel::build(desk_cfg(regime), 5).unwrap();
            let mut tape = Tape::new();
            model.forward(&mut tape, &frames, false, false).unwrap();
            let trainable = count_params(&model.store, true);
            let all = count_params(&model.store, false);
            assert!(trainable.seq_head > 0);
            match regime {
                Regime::Frozen => {
                    assert_eq!(trainable.backbone, 0);
                    assert_eq!(trainable.total, all.seq_head);
                }
                Regime::Full => assert_eq!(trainable.backbone, all.backbone),
                Regime::Partial(_) => {
                    assert!(trainable.backbone > 0);
                    assert!(trainable.backbone < all.backbone);
                }
                Regime::AdaptSign => {
                    assert_eq!(trainable.backbone, 0);
                    assert!(trainable.adapters > 0);
                    assert!(trainable.multiscale > 0);
                    assert!(trainable.cross_frame > 0);
                    assert!(trainable.prefix > 0);
                }
            }
        }
    }

    #[test]
    fn forward_cost_equals_the_analytic_report_exactly() {
        let cfg = desk_cfg(Regime::AdaptSign);
        let model: SignModel<f64> = SignModel::build(cfg.clone(), 6).unwrap();
        let t = 5;
        let frames = random_frames(t, 32, 7);
        let mut tape = Tape::new();
        model.forward(&mut tape, &frames, false, false).unwrap();
        let report = count_flops(&cfg.vit, &cfg.adapt, cfg.vocab, t);
        let analytic = report.backbone.macs
            + report.adapters.macs
            + report.prefix.macs
            + report.multiscale.macs
            + report.cross_frame.macs
            + report.seq_head.macs;
        assert_eq!(tape.macs(), analytic);
    }

    #[test]
    fn too_short_clips_surface_the_sequence_error() {
        let model: SignModel<f32> = SignModel::build(desk_cfg(Regime::Frozen), 8).unwrap();
        let frames = random_frames(3, 32, 9);
        let mut tape = Tape::new();
        match model.forward(&mut tape, &frames, false, false) {
            Err(Error::SequenceTooShort { got: 3, min: 4 }) => {}
            other => panic!("expected SequenceTooShort, got {:?}", other.map(|_| ())),
        }
    }

    /// End-to-end loss gradient through head, fusion, adaptation, and
    /// backbone on a reduced geometry; the desk-size run lives in the
    /// acceptance suite.
    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let cfg = ModelConfig {
            vit: ViTConfig {
                layers: 2,
                dim: 8,
                heads: 2,
                patch: 4,
                image: 8,
            },
            adapt: AdaptConfig {
                prefix_len: 2,
                ..AdaptConfig::default()
            },
            regime: Regime::AdaptSign,
            vocab: 2,
        };
        let model: SignModel<f64> = SignModel::build(cfg, 10).unwrap();
        let frames = random_frames(4, 8, 11);
        let labels = vec![1usize];

        let trainable: Vec<(ParamId, Tensor<f64>)> = model
            .store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, p)| (id, p.value.clone()))
            .collect();
        let ids: Vec<ParamId> = trainable.iter().map(|(id, _)| *id).collect();
        let tensors: Vec<Tensor<f64>> = trainable.into_iter().map(|(_, t)| t).collect();

        let f = {
            let frames = frames.clone();
            let ids = ids.clone();
            move |tape: &mut Tape<f64>, leaves: &[Var]| -> Var {
                let bound = Bound::bind_with(&model.store, tape, |id, _| {
                    ids.iter().position(|&x| x == id).map(|k| leaves[k])
                });
                let out = model.forward_bound(tape, &bound, &frames, false).unwrap();
                match ctc_forward_loss(tape, out.lattice, &labels, 2).unwrap() {
                    CtcOutcome::Loss(l) => l,
                    CtcOutcome::Infeasible => panic!("feasible by construction"),
                }
            }
        };
        let cfg_gc = GradCheckConfig {
            exhaustive_limit: 0,
            sampled_coords: 2,
            ..GradCheckConfig::default()
        };
        let report = grad_check(&f, &tensors, 1e-4, &cfg_gc).unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err());
    }
}
