//! Analytic parameter and multiply-accumulate accounting: per-component
//! costs, overhead ratios against the backbone with published-figure bands,
//! and scaling fits over the patch count.
//!
//! Counting conventions match the tape's instrumentation: a matrix product
//! `[p,q]x[q,s]` costs `p*q*s` MACs, layer norm 3 MACs per element, softmax
//! and log-softmax 2 MACs per element, and everything else (bias, residual,
//! activation, gather, concatenation) is free. 1 MAC = 2 FLOPs; every report
//! states the convention.

use serde::{Deserialize, Serialize};

use crate::adaptation::{adapter_hidden, AdaptConfig};
use crate::backbone::ViTConfig;
use crate::elem::Elem;
use crate::params::ParamStore;

pub const MAC_CONVENTION: &str = "1 MAC = 2 FLOPs";

/// Closed-form MAC model parameterized directly by the patch count, so that
/// scaling questions can be asked at token counts with no square grid.
#[derive(Clone, Copy, Debug)]
pub struct MacDims {
    pub layers: u64,
    pub dim: u64,
    pub heads: u64,
    pub n_patches: u64,
    pub patch_dim: u64,
}

impl MacDims {
    pub fn from_vit(cfg: &ViTConfig) -> Self {
        Self {
            layers: cfg.layers as u64,
            dim: cfg.dim as u64,
            heads: cfg.heads as u64,
            n_patches: cfg.n_patches() as u64,
            patch_dim: cfg.patch_dim() as u64,
        }
    }

    pub fn with_patches(mut self, n: u64) -> Self {
        self.n_patches = n;
        self
    }

    fn tokens(&self) -> u64 {
        self.n_patches + 1
    }

    /// Backbone forward MACs for one frame, with `m` extra key/value columns
    /// per attention when a prefix is attached.
    pub fn backbone_frame(&self, m: u64) -> u64 {
        let (d, h, nt) = (self.dim, self.heads, self.tokens());
        let block =
            6 * nt * d + 12 * nt * d * d + 2 * nt * d * (nt + m) + 2 * h * nt * (nt + m);
        self.n_patches * self.patch_dim * d + self.layers * block + 3 * nt * d
    }

    /// The quadratic-in-token-count part of backbone attention: score and
    /// aggregation products plus softmax, excluding the linear projections.
    pub fn attention_quadratic_frame(&self) -> u64 {
        let (d, h, nt) = (self.dim, self.heads, self.tokens());
        self.layers * (2 * nt * nt * d + 2 * h * nt * nt)
    }

    /// Both adapters in every block, applied across all tokens of a frame.
    pub fn adapters_frame(&self, hidden: u64) -> u64 {
        4 * self.layers * self.tokens() * self.dim * hidden
    }

    /// Extra attention cost of `m` prefix key/value columns per block.
    pub fn prefix_frame(&self, m: u64) -> u64 {
        self.backbone_frame(m) - self.backbone_frame(0)
    }

    /// One aggregation-token pass over every layer plus the output head.
    pub fn multiscale_frame(&self, projected: bool) -> u64 {
        let (d, nt) = (self.dim, self.tokens());
        let mut layer = 9 * d * d + 5 * nt * d + 6 * d + 2 * nt;
        if projected {
            layer += 2 * nt * d * d;
        }
        self.layers * layer + d * d
    }

    /// Mid-sequence per-frame cost of sigmoid-gated neighborhood
    /// aggregation: both gating products over `window` frames of patches,
    /// plus the amortized query/key norms.
    pub fn cross_frame_frame(&self, tau: u64, bidirectional: bool) -> u64 {
        let (d, n) = (self.dim, self.n_patches);
        let window = if bidirectional { 2 * tau + 1 } else { tau + 1 };
        3 * d + 3 * n * d + 2 * window * n * d
    }

    /// Exact total over a `t`-frame clip, with neighborhoods clamped at the
    /// sequence boundaries.
    pub fn cross_frame_total(&self, tau: usize, bidirectional: bool, t: usize) -> u64 {
        let (d, n) = (self.dim, self.n_patches);
        let mut total = 3 * t as u64 * d + 3 * t as u64 * n * d;
        for f in 0..t {
            let (lo, hi) = crate::adaptation::neighborhood(f, t, tau, bidirectional);
            total += 2 * (hi - lo + 1) as u64 * n * d;
        }
        total
    }

    /// Conv/pool pyramid, two BiLSTM layers, and the classifier over a
    /// `t`-frame clip with `vocab` glosses.
    pub fn seq_head_total(&self, vocab: u64, t: usize) -> u64 {
        let d = self.dim;
        let t = t as u64;
        let t2 = t / 2;
        let t4 = t2 / 2;
        5 * d * d * (t + t2) + 12 * d * d * t4 + t4 * (d + 2) * (vocab + 1)
    }
}

/// Closed-form parameter counts mirroring what registration creates.
pub mod params_of {
    pub fn backbone(l: u64, d: u64, tokens: u64, patch_dim: u64) -> u64 {
        let block = 12 * d * d + 13 * d;
        patch_dim * d + d + d + tokens * d + l * block + 2 * d
    }

    pub fn one_adapter(d: u64, hidden: u64) -> u64 {
        2 * d * hidden + hidden + d
    }

    pub fn adapters(l: u64, d: u64, hidden: u64) -> u64 {
        2 * l * one_adapter(d, hidden)
    }

    pub fn prefix(l: u64, d: u64, m: u64, shared: bool) -> u64 {
        if m == 0 {
            0
        } else if shared {
            m * d
        } else {
            l * m * d
        }
    }

    pub fn multiscale(l: u64, d: u64, projected: bool) -> u64 {
        let mut layer = 9 * d * d + 10 * d;
        if projected {
            layer += 2 * (d * d + d);
        }
        d + l * layer + d * d + d
    }

    pub fn cross_frame(d: u64) -> u64 {
        4 * d
    }

    pub fn seq_head(d: u64, vocab: u64) -> u64 {
        let conv = 2 * (5 * d * d + d);
        let lstm = 4 * (3 * d * d + 2 * d);
        conv + lstm + (d + 1) * (vocab + 1)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComponentCost {
    pub name: String,
    pub params: u64,
    pub macs: u64,
    pub ratio_vs_backbone: f64,
}

/// Per-component cost breakdown for a `frames`-long clip.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CostReport {
    pub convention: String,
    pub frames: usize,
    pub backbone: ComponentCost,
    pub adapters: ComponentCost,
    pub prefix: ComponentCost,
    pub multiscale: ComponentCost,
    pub cross_frame: ComponentCost,
    pub seq_head: ComponentCost,
    /// The four adaptation components combined; the sequence head is a task
    /// head present in every regime, not an added module.
    pub added_total: ComponentCost,
}

impl CostReport {
    pub fn components(&self) -> [&ComponentCost; 7] {
        [
            &self.backbone,
            &self.adapters,
            &self.prefix,
            &self.multiscale,
            &self.cross_frame,
            &self.seq_head,
            &self.added_total,
        ]
    }

    pub fn text_table(&self, per_frame: bool) -> String {
        let mut out = format!(
            "{:<12} {:>14} {:>16} {:>10}\n",
            "component", "params", "macs", "vs backbone"
        );
        for c in self.components() {
            let macs = if per_frame {
                format!("{:.1}", c.macs as f64 / self.frames as f64)
            } else {
                c.macs.to_string()
            };
            let _ = std::fmt::Write::write_fmt(
                &mut out,
                format_args!(
                    "{:<12} {:>14} {:>16} {:>9.4}%\n",
                    c.name,
                    c.params,
                    macs,
                    100.0 * c.ratio_vs_backbone
                ),
            );
        }
        out.push_str(&format!(
            "({}; macs are {})\n",
            self.convention,
            if per_frame { "per frame" } else { "clip totals" }
        ));
        out
    }
}

/// Analytic cost report for a clip of `t` frames.
pub fn count_flops(vit: &ViTConfig, adapt: &AdaptConfig, vocab: usize, t: usize) -> CostReport {
    let dims = MacDims::from_vit(vit);
    let (l, d) = (dims.layers, dims.dim);
    let hidden = adapter_hidden(vit.dim, adapt.adapter_ratio) as u64;
    let m = adapt.prefix_len as u64;
    let t64 = t as u64;

    let backbone_macs = dims.backbone_frame(0) * t64;
    let mk = |name: &str, params: u64, macs: u64| ComponentCost {
        name: name.into(),
        params,
        macs,
        ratio_vs_backbone: macs as f64 / backbone_macs as f64,
    };

    let backbone = mk(
        "backbone",
        params_of::backbone(l, d, dims.tokens(), dims.patch_dim),
        backbone_macs,
    );
    let adapters = mk(
        "adapters",
        params_of::adapters(l, d, hidden),
        dims.adapters_frame(hidden) * t64,
    );
    let prefix = mk(
        "prefix",
        params_of::prefix(l, d, m, adapt.prefix_shared),
        dims.prefix_frame(m) * t64,
    );
    let multiscale = mk(
        "multiscale",
        params_of::multiscale(l, d, adapt.multiscale_projected),
        dims.multiscale_frame(adapt.multiscale_projected) * t64,
    );
    let cross_frame = mk(
        "cross-frame",
        params_of::cross_frame(d),
        dims.cross_frame_total(adapt.temporal_radius, adapt.bidirectional, t),
    );
    let seq_head = mk(
        "seq-head",
        params_of::seq_head(d, vocab as u64),
        dims.seq_head_total(vocab as u64, t),
    );
    let added_total = mk(
        "added-total",
        adapters.params + prefix.params + multiscale.params + cross_frame.params,
        adapters.macs + prefix.macs + multiscale.macs + cross_frame.macs,
    );
    CostReport {
        convention: MAC_CONVENTION.into(),
        frames: t,
        backbone,
        adapters,
        prefix,
        multiscale,
        cross_frame,
        seq_head,
        added_total,
    }
}

/// Exact integer parameter counts by name prefix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub backbone: u64,
    pub adapters: u64,
    pub prefix: u64,
    pub multiscale: u64,
    pub cross_frame: u64,
    pub seq_head: u64,
    pub other: u64,
    pub total: u64,
}

pub fn count_params<E: Elem>(store: &ParamStore<E>, trainable_only: bool) -> ParamCounts {
    let mut c = ParamCounts::default();
    for (_, p) in store.iter() {
        if trainable_only && !p.trainable {
            continue;
        }
        let n = p.value.numel() as u64;
        let name = p.name.as_str();
        let bucket = if name.starts_with("backbone/") {
            &mut c.backbone
        } else if name.contains("/adapter_") {
            &mut c.adapters
        } else if name == "adaptation/prefix" || name.ends_with("/prefix") {
            &mut c.prefix
        } else if name.starts_with("adaptation/multiscale/") {
            &mut c.multiscale
        } else if name.starts_with("adaptation/crossframe/") {
            &mut c.cross_frame
        } else if name.starts_with("seq/") {
            &mut c.seq_head
        } else {
            &mut c.other
        };
        *bucket += n;
        c.total += n;
    }
    c
}

/// One component's ratio against the backbone, compared to a published
/// figure and an acceptance band where one applies. `within_band: None`
/// means the row is reported for information only.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BandCheck {
    pub component: String,
    pub ratio: f64,
    pub published_ratio: Option<f64>,
    pub band: Option<(f64, f64)>,
    pub within_band: Option<bool>,
    pub note: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OverheadReport {
    pub convention: String,
    pub checks: Vec<BandCheck>,
}

impl OverheadReport {
    pub fn check(&self, component: &str) -> &BandCheck {
        self.checks
            .iter()
            .find(|c| c.component == component)
            .unwrap_or_else(|| panic!("no overhead row named {component}"))
    }

    pub fn text_table(&self) -> String {
        let mut out = format!(
            "{:<22} {:>9} {:>10} {:>16} {:>7}\n",
            "component", "ratio", "published", "band", "status"
        );
        for c in &self.checks {
            let published = c
                .published_ratio
                .map(|p| format!("{:.1}%", 100.0 * p))
                .unwrap_or_else(|| "-".into());
            let band = c
                .band
                .map(|(lo, hi)| format!("[{:.1}%, {:.1}%]", 100.0 * lo, 100.0 * hi))
                .unwrap_or_else(|| "-".into());
            let status = match c.within_band {
                Some(true) => "pass",
                Some(false) => "OUT",
                None => "info",
            };
            let _ = std::fmt::Write::write_fmt(
                &mut out,
                format_args!(
                    "{:<22} {:>8.4}% {:>10} {:>16} {:>7}\n",
                    c.component,
                    100.0 * c.ratio,
                    published,
                    band,
                    status
                ),
            );
        }
        out.push_str(&format!("({})\n", self.convention));
        out
    }
}

/// Compares forward-cost ratios at the full-size defaults against the
/// published overhead figures. Band rows get a pass/fail; the adapter row
/// and the projected-multiscale variant are informational flags.
pub fn overhead_report(vit: &ViTConfig, adapt: &AdaptConfig) -> OverheadReport {
    let report = count_flops(vit, adapt, 1, 1);
    let mut projected_cfg = adapt.clone();
    projected_cfg.multiscale_projected = true;
    let projected = count_flops(vit, &projected_cfg, 1, 1);

    let banded = |component: &str, ratio: f64, published: f64, lo: f64, hi: f64, note: &str| {
        BandCheck {
            component: component.into(),
            ratio,
            published_ratio: Some(published),
            band: Some((lo, hi)),
            within_band: Some(ratio >= lo && ratio <= hi),
            note: note.into(),
        }
    };

    let checks = vec![
        BandCheck {
            component: "adapters".into(),
            ratio: report.adapters.ratio_vs_backbone,
            published_ratio: Some(0.001),
            band: None,
            within_band: None,
            note: "published 0.1% figure is not reproducible by MAC or parameter \
                   counting at r=1/4; reported, not asserted"
                .into(),
        },
        BandCheck {
            component: "prefix".into(),
            ratio: report.prefix.ratio_vs_backbone,
            published_ratio: None,
            band: Some((0.0, 0.01)),
            within_band: Some(report.prefix.ratio_vs_backbone <= 0.01),
            note: "m extra key/value columns per attention".into(),
        },
        banded(
            "multiscale",
            report.multiscale.ratio_vs_backbone,
            0.019,
            0.005,
            0.04,
            "lightweight mode: unprojected keys/values",
        ),
        banded(
            "cross-frame",
            report.cross_frame.ratio_vs_backbone,
            0.010,
            0.0,
            0.02,
            "sigmoid-gated neighborhood aggregation",
        ),
        banded(
            "total",
            report.added_total.ratio_vs_backbone,
            0.032,
            0.01,
            0.06,
            "all four added modules combined",
        ),
        BandCheck {
            component: "multiscale-projected".into(),
            ratio: projected.multiscale.ratio_vs_backbone,
            published_ratio: Some(0.019),
            band: None,
            within_band: None,
            note: "projected keys/values would exceed 10% of the backbone, \
                   inconsistent with the published figure"
                .into(),
        },
    ];
    OverheadReport {
        convention: MAC_CONVENTION.into(),
        checks,
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (mut sx, mut sy) = (0.0, 0.0);
    for (x, y) in points {
        sx += x.ln();
        sy += y.ln();
    }
    let (mx, my) = (sx / n, sy / n);
    let (mut num, mut den) = (0.0, 0.0);
    for (x, y) in points {
        num += (x.ln() - mx) * (y.ln() - my);
        den += (x.ln() - mx) * (x.ln() - mx);
    }
    num / den
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScalingFit {
    pub component: String,
    pub exponent: f64,
    pub points: Vec<(u64, u64)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScalingReport {
    pub patch_counts: Vec<u64>,
    pub fits: Vec<ScalingFit>,
}

impl ScalingReport {
    pub fn fit(&self, component: &str) -> &ScalingFit {
        self.fits
            .iter()
            .find(|f| f.component == component)
            .unwrap_or_else(|| panic!("no scaling fit named {component}"))
    }

    pub fn text_table(&self) -> String {
        let mut out = format!("{:<20} {:>9}\n", "component", "exponent");
        for f in &self.fits {
            let _ = std::fmt::Write::write_fmt(
                &mut out,
                format_args!("{:<20} {:>9.3}\n", f.component, f.exponent),
            );
        }
        out
    }
}

/// Fits per-frame MAC growth exponents over the given patch counts; added
/// modules should be near-linear, the backbone's attention core quadratic.
pub fn scaling_report(vit: &ViTConfig, adapt: &AdaptConfig, patch_counts: &[u64]) -> ScalingReport {
    let base = MacDims::from_vit(vit);
    let hidden = adapter_hidden(vit.dim, adapt.adapter_ratio) as u64;
    let m = adapt.prefix_len as u64;
    let tau = adapt.temporal_radius as u64;

    let series = |f: &dyn Fn(MacDims) -> u64| -> Vec<(u64, u64)> {
        patch_counts
            .iter()
            .map(|&n| (n, f(base.with_patches(n))))
            .collect()
    };
    let fit = |name: &str, f: &dyn Fn(MacDims) -> u64| -> ScalingFit {
        let points = series(f);
        let as_f64: Vec<(f64, f64)> =
            points.iter().map(|&(n, y)| (n as f64, y as f64)).collect();
        ScalingFit {
            component: name.into(),
            exponent: log_log_slope(&as_f64),
            points,
        }
    };

    let fits = vec![
        fit("adapters", &|d| d.adapters_frame(hidden)),
        fit("prefix", &|d| d.prefix_frame(m)),
        fit("multiscale", &|d| {
            d.multiscale_frame(adapt.multiscale_projected)
        }),
        fit("cross-frame", &|d| {
            d.cross_frame_frame(tau, adapt.bidirectional)
        }),
        fit("backbone-attention", &|d| d.attention_quadratic_frame()),
    ];
    ScalingReport {
        patch_counts: patch_counts.to_vec(),
        fits,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adaptation::{
        adapter_forward, cross_frame_attention, multiscale_init, multiscale_output,
        multiscale_step, register_adaptation,
    };
    use crate::backbone::{backbone_forward, register_backbone, BlockHooks, Regime};
    use crate::params::Bound;
    use crate::seq::{register_seq, seq_head_forward, SeqConfig};
    use crate::tape::Tape;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn b16() -> (ViTConfig, AdaptConfig) {
        (ViTConfig::b16_full(), AdaptConfig::default())
    }

    #[test]
    fn full_size_backbone_parameter_formula_is_exact() {
        let (vit, _) = b16();
        let d = MacDims::from_vit(&vit);
        assert_eq!(
            params_of::backbone(d.layers, d.dim, d.tokens(), d.patch_dim),
            85_798_656
        );
    }

    #[test]
    fn one_adapter_at_full_width_counts_295872_parameters() {
        assert_eq!(params_of::one_adapter(768, 192), 295_872);
    }

    #[test]
    fn formulas_match_registered_parameters_at_desk_scale() {
        let vit = ViTConfig::desk();
        let adapt = AdaptConfig::default();
        let seq = SeqConfig {
            dim: vit.dim,
            vocab: 6,
        };
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        register_backbone(&mut store, &vit, &mut rng).unwrap();
        register_adaptation(&mut store, vit.layers, vit.dim, &adapt, &mut rng).unwrap();
        register_seq(&mut store, &seq, &mut rng).unwrap();

        let counts = count_params(&store, false);
        let d = MacDims::from_vit(&vit);
        let hidden = adapter_hidden(vit.dim, adapt.adapter_ratio) as u64;
        assert_eq!(
            counts.backbone,
            params_of::backbone(d.layers, d.dim, d.tokens(), d.patch_dim)
        );
        assert_eq!(counts.adapters, params_of::adapters(d.layers, d.dim, hidden));
        assert_eq!(
            counts.prefix,
            params_of::prefix(d.layers, d.dim, adapt.prefix_len as u64, adapt.prefix_shared)
        );
        assert_eq!(
            counts.multiscale,
            params_of::multiscale(d.layers, d.dim, adapt.multiscale_projected)
        );
        assert_eq!(counts.cross_frame, params_of::cross_frame(d.dim));
        assert_eq!(counts.seq_head, params_of::seq_head(d.dim, 6));
        assert_eq!(counts.other, 0);
        assert_eq!(counts.total, store.total_params());
    }

    #[test]
    fn frozen_regime_has_no_trainable_backbone_parameters() {
        let vit = ViTConfig::desk();
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        register_backbone(&mut store, &vit, &mut rng).unwrap();
        crate::backbone::set_trainability(&mut store, &vit, Regime::Frozen).unwrap();
        let counts = count_params(&store, true);
        assert_eq!(counts.backbone, 0);
        assert_eq!(counts.total, 0);
    }

    #[test]
    fn full_size_backbone_macs_land_near_the_published_figure() {
        let (vit, _) = b16();
        let macs = MacDims::from_vit(&vit).backbone_frame(0) as f64;
        let published = 17.6e9;
        assert!(
            (macs - published).abs() / published < 0.10,
            "backbone macs {macs:.3e}"
        );
    }

    #[test]
    fn prefix_adds_a_small_fraction_of_key_value_columns() {
        let (vit, adapt) = b16();
        let extra_columns = adapt.prefix_len as f64 / vit.tokens() as f64;
        assert!((extra_columns - 0.0406).abs() < 0.001);
        let report = count_flops(&vit, &adapt, 1, 1);
        assert!(report.prefix.ratio_vs_backbone < 0.01);
    }

    #[test]
    fn overhead_rows_report_the_published_comparison_truthfully() {
        let (vit, adapt) = b16();
        let report = overhead_report(&vit, &adapt);

        let cross = report.check("cross-frame");
        assert!(cross.ratio <= 0.02);
        assert_eq!(cross.within_band, Some(true));

        let prefix = report.check("prefix");
        assert_eq!(prefix.within_band, Some(true));

        // The lightweight multiscale module costs ~0.42% of the backbone,
        // short of the [0.5%, 4%] band around the published 1.9%; the row
        // must say so rather than pass.
        let ms = report.check("multiscale");
        assert!((ms.ratio - 0.004175).abs() < 2e-4, "ratio {}", ms.ratio);
        assert_eq!(ms.within_band, Some(false));

        // Adapters dominate the added cost; the combined ratio (~8.5%)
        // exceeds the [1%, 6%] band around the published 3.2%.
        let total = report.check("total");
        assert!((total.ratio - 0.0853).abs() < 2e-3, "ratio {}", total.ratio);
        assert_eq!(total.within_band, Some(false));

        let projected = report.check("multiscale-projected");
        assert!(projected.ratio > 0.10, "ratio {}", projected.ratio);
        assert_eq!(projected.within_band, None);

        let adapters = report.check("adapters");
        assert_eq!(adapters.within_band, None);
        assert!(adapters.ratio > 0.05, "ratio {}", adapters.ratio);

        assert!(report.text_table().contains("1 MAC = 2 FLOPs"));
    }

    #[test]
    fn scaling_exponents_separate_added_modules_from_attention() {
        let (vit, adapt) = b16();
        let report = scaling_report(&vit, &adapt, &[16, 49, 196]);
        for name in ["adapters", "prefix", "multiscale", "cross-frame"] {
            let f = report.fit(name);
            assert!(f.exponent <= 1.1, "{name} exponent {}", f.exponent);
        }
        let attn = report.fit("backbone-attention");
        assert!(attn.exponent >= 1.8, "attention exponent {}", attn.exponent);
    }

    #[test]
    fn doubling_patches_quadruples_attention_but_at_most_doubles_added_terms() {
        let (vit, adapt) = b16();
        let base = MacDims::from_vit(&vit);
        let n = base.n_patches;
        let hidden = adapter_hidden(vit.dim, adapt.adapter_ratio) as u64;
        let m = adapt.prefix_len as u64;
        let tau = adapt.temporal_radius as u64;

        let ratio = |f: &dyn Fn(MacDims) -> u64| {
            f(base.with_patches(2 * n)) as f64 / f(base.with_patches(n)) as f64
        };
        let attn = ratio(&|d| d.attention_quadratic_frame());
        assert!((3.5..=4.1).contains(&attn), "attention ratio {attn}");
        let added: Vec<(&str, Box<dyn Fn(MacDims) -> u64>)> = vec![
            ("adapters", Box::new(move |d| d.adapters_frame(hidden))),
            ("prefix", Box::new(move |d| d.prefix_frame(m))),
            ("multiscale", Box::new(|d| d.multiscale_frame(false))),
            ("cross-frame", Box::new(move |d| d.cross_frame_frame(tau, true))),
        ];
        for (name, f) in &added {
            let r = ratio(f.as_ref());
            assert!(r <= 2.0, "{name} ratio {r}");
        }
    }

    #[test]
    fn slope_fitting_recovers_exact_power_laws() {
        let points: Vec<(f64, f64)> = [16.0f64, 49.0, 196.0]
            .iter()
            .map(|&n| (n, 3.0 * n * n))
            .collect();
        assert!((log_log_slope(&points) - 2.0).abs() < 1e-12);
        let points: Vec<(f64, f64)> = [16.0f64, 49.0, 196.0]
            .iter()
            .map(|&n| (n, 0.5 * n))
            .collect();
        assert!((log_log_slope(&points) - 1.0).abs() < 1e-12);
    }

    /// Every analytic formula must reproduce the tape's instrumented count
    /// exactly, component by component, on desk shapes.
    #[test]
    fn analytic_counts_match_the_tape_exactly() {
        let vit = ViTConfig::desk();
        let adapt = AdaptConfig::default();
        let dims = MacDims::from_vit(&vit);
        let t = 5usize;
        let vocab = 6usize;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let frames: Tensor<f64> = Tensor::from_vec(
            &[t, 3, vit.image, vit.image],
            (0..t * 3 * vit.image * vit.image)
                .map(|_| rng.gen_range(0.0..1.0))
                .collect(),
        );

        let mut store: ParamStore<f64> = ParamStore::new();
        let backbone_ids = register_backbone(&mut store, &vit, &mut rng).unwrap();
        let adapt_ids =
            register_adaptation(&mut store, vit.layers, vit.dim, &adapt, &mut rng).unwrap();
        let seq_ids = register_seq(
            &mut store,
            &SeqConfig {
                dim: vit.dim,
                vocab,
            },
            &mut rng,
        )
        .unwrap();

        // Plain backbone.
        let mut tape = Tape::new();
        let bound = Bound::bind(&store, &mut tape, false);
        let bb = backbone_ids.bind(&bound);
        let out = backbone_forward(&mut tape, &vit, &bb, &frames, &[], false).unwrap();
        let plain_macs = tape.macs();
        assert_eq!(plain_macs, dims.backbone_frame(0) * t as u64);

        // Backbone with prefix hooks.
        let mut tape = Tape::new();
        let bound = Bound::bind(&store, &mut tape, false);
        let bb = backbone_ids.bind(&bound);
        let ad = adapt_ids.bind(&bound);
        let hooks: Vec<Option<BlockHooks>> = (0..vit.layers)
            .map(|l| {
                Some(BlockHooks {
                    prefix: ad.prefix[l],
                    ..Default::default()
                })
            })
            .collect();
        backbone_forward(&mut tape, &vit, &bb, &frames, &hooks, false).unwrap();
        let m = adapt.prefix_len as u64;
        assert_eq!(
            tape.macs(),
            (dims.backbone_frame(m)) * t as u64
        );
        assert_eq!(
            tape.macs() - plain_macs,
            dims.prefix_frame(m) * t as u64
        );

        // Adapters alone (both per block), measured via their forward deltas.
        let mut tape = Tape::new();
        let bound = Bound::bind(&store, &mut tape, false);
        let ad = adapt_ids.bind(&bound);
        let z = tape.constant(Tensor::zeros(&[t, vit.tokens(), vit.dim]));
        for (msa, ffn) in &ad.adapters {
            adapter_forward(&mut tape, z, msa);
            adapter_forward(&mut tape, z, ffn);
        }
        let hidden = adapter_hidden(vit.dim, adapt.adapter_ratio) as u64;
        assert_eq!(tape.macs(), dims.adapters_frame(hidden) * t as u64);

        // Multiscale over the backbone's layer outputs.
        let mut tape = Tape::new();
        let bound = Bound::bind(&store, &mut tape, false);
        let bb = backbone_ids.bind(&bound);
        let ad = adapt_ids.bind(&bound);
        let out2 = backbone_forward(&mut tape, &vit, &bb, &frames, &[], false).unwrap();
        let before = tape.macs();
        let mut x_mul = multiscale_init(&mut tape, &ad.multiscale, t);
        for (layer_vars, z_l) in ad.multiscale.layers.iter().zip(&out2.layers) {
            x_mul = multiscale_step(&mut tape, x_mul, *z_l, layer_vars);
        }
        multiscale_output(&mut tape, &ad.multiscale, x_mul);
        assert_eq!(
            tape.macs() - before,
            dims.multiscale_frame(adapt.multiscale_projected) * t as u64
        );

        // Cross-frame attention on the final tokens.
        let mut tape = Tape::new();
        let bound = Bound::bind(&store, &mut tape, false);
        let bb = backbone_ids.bind(&bound);
        let ad = adapt_ids.bind(&bound);
        let out3 = backbone_forward(&mut tape, &vit, &bb, &frames, &[], false).unwrap();
        let patches = crate::backbone::patch_rows(&mut tape, out3.final_tokens);
        let before = tape.macs();
        cross_frame_attention(
            &mut tape,
            out3.cls,
            patches,
            &ad.cross_frame,
            adapt.temporal_radius,
            adapt.bidirectional,
            None,
        );
        assert_eq!(
            tape.macs() - before,
            dims.cross_frame_total(adapt.temporal_radius, adapt.bidirectional, t)
        );

        // Sequence head.
        let mut tape = Tape::new();
        let bound = Bound::bind(&store, &mut tape, false);
        let sq = seq_ids.bind(&bound);
        let feats = tape.constant(Tensor::zeros(&[t, vit.dim]));
        seq_head_forward(&mut tape, &sq, feats).unwrap();
        assert_eq!(tape.macs(), dims.seq_head_total(vocab as u64, t));

        drop(out);
    }
}
