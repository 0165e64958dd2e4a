//! Lightweight adaptation modules grafted onto the frozen backbone:
//! bottleneck adapters, key/value prefix embeddings, a multiscale aggregation
//! token that reads every backbone layer, and sigmoid-gated cross-frame
//! attention over neighboring frames. Each is built to be an exact identity
//! at a known parameter setting so the frozen path is recoverable.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::params::{trunc_normal, Bound, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

/// Tunables for all four mechanisms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    /// Adapter bottleneck ratio r; hidden width is ceil(r*d).
    pub adapter_ratio: f64,
    /// Prefix length m; 0 disables prefixing.
    pub prefix_len: usize,
    /// One prefix embedding shared by all layers instead of per-layer ones.
    pub prefix_shared: bool,
    /// Cross-frame temporal radius.
    pub temporal_radius: usize,
    /// Neighborhood covers past and future frames; otherwise future only.
    pub bidirectional: bool,
    /// Project multiscale keys/values instead of using normalized tokens
    /// directly.
    pub multiscale_projected: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            adapter_ratio: 0.25,
            prefix_len: 8,
            prefix_shared: false,
            temporal_radius: 2,
            bidirectional: true,
            multiscale_projected: false,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.adapter_ratio > 0.0 && self.adapter_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "adapter ratio must be in (0, 1], got {}",
                self.adapter_ratio
            )));
        }
        Ok(())
    }
}

/// Adapter bottleneck width for dimension `d` and ratio `r`.
pub fn adapter_hidden(d: usize, r: f64) -> usize {
    ((r * d as f64).ceil() as usize).max(1)
}

/// Parameters in one adapter: down-projection, up-projection, biases.
pub fn adapter_param_count(d: usize, r: f64) -> u64 {
    let h = adapter_hidden(d, r) as u64;
    let d = d as u64;
    d * h + h + h * d + d
}

#[derive(Clone, Debug)]
pub struct AdapterIds {
    pub fc1: ParamId,
    pub b1: ParamId,
    pub fc2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Copy)]
pub struct AdapterVars {
    pub fc1: Var,
    pub b1: Var,
    pub fc2: Var,
    pub b2: Var,
}

impl AdapterIds {
    pub fn bind(&self, b: &Bound) -> AdapterVars {
        AdapterVars {
            fc1: b.var(self.fc1),
            b1: b.var(self.b1),
            fc2: b.var(self.fc2),
            b2: b.var(self.b2),
        }
    }
}

/// Registers one adapter. The up-projection starts at exactly zero so the
/// branch is an identity at initialization.
pub fn register_adapter<E: Elem>(
    store: &mut ParamStore<E>,
    name: &str,
    d: usize,
    r: f64,
    rng: &mut ChaCha8Rng,
) -> AdapterIds {
    let h = adapter_hidden(d, r);
    AdapterIds {
        fc1: store.add(format!("{name}/fc1/weight"), trunc_normal(rng, &[d, h], INIT_STD)),
        b1: store.add(format!("{name}/fc1/bias"), Tensor::zeros(&[h])),
        fc2: store.add(format!("{name}/fc2/weight"), Tensor::zeros(&[h, d])),
        b2: store.add(format!("{name}/fc2/bias"), Tensor::zeros(&[d])),
    }
}

/// Bottleneck branch `fc2(gelu(fc1(z)))`; shape-preserving over any leading
/// extents.
pub fn adapter_forward<E: Elem>(tape: &mut Tape<E>, z: Var, a: &AdapterVars) -> Var {
    let shape = tape.value(z).shape().to_vec();
    let d = *shape.last().expect("adapter input has a last axis");
    let rows: usize = shape[..shape.len() - 1].iter().product();
    let flat = tape.reshape(z, &[rows, d]);
    let h = tape.matmul(flat, a.fc1);
    let h = tape.add_bias(h, a.b1);
    let h = tape.gelu(h);
    let out = tape.matmul(h, a.fc2);
    let out = tape.add_bias(out, a.b2);
    tape.reshape(out, &shape)
}

#[derive(Clone, Debug, Default)]
pub struct PrefixIds {
    /// One entry per layer (the same id repeated in shared mode); empty when
    /// prefixing is disabled.
    pub per_layer: Vec<ParamId>,
}

pub fn register_prefix<E: Elem>(
    store: &mut ParamStore<E>,
    layers: usize,
    d: usize,
    m: usize,
    shared: bool,
    rng: &mut ChaCha8Rng,
) -> PrefixIds {
    if m == 0 {
        return PrefixIds::default();
    }
    let per_layer = if shared {
        let id = store.add("adaptation/prefix", trunc_normal(rng, &[m, d], INIT_STD));
        vec![id; layers]
    } else {
        (0..layers)
            .map(|l| {
                store.add(
                    format!("adaptation/block{l:02}/prefix"),
                    trunc_normal(rng, &[m, d], INIT_STD),
                )
            })
            .collect()
    };
    PrefixIds { per_layer }
}

/// Single-head scaled dot-product attention with the same embedding
/// prepended to keys and values. `q` is `[qn, d]`, `k`/`v` are `[n, d]`, the
/// optional prefix is `[m, d]`. Returns `(output, attention weights)`.
pub fn prefix_attention_with_weights<E: Elem>(
    tape: &mut Tape<E>,
    q: Var,
    k: Var,
    v: Var,
    p: Option<Var>,
) -> (Var, Var) {
    let d = tape.value(q).last_dim();
    let (kk, vv) = match p {
        Some(p) => (tape.concat0(&[p, k]), tape.concat0(&[p, v])),
        None => (k, v),
    };
    let scores = tape.matmul_nt(q, kk);
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = tape.softmax_last(scores);
    (tape.matmul(weights, vv), weights)
}

pub fn prefix_attention<E: Elem>(
    tape: &mut Tape<E>,
    q: Var,
    k: Var,
    v: Var,
    p: Option<Var>,
) -> Var {
    prefix_attention_with_weights(tape, q, k, v, p).0
}

#[derive(Clone, Debug)]
pub struct MultiscaleLayerIds {
    pub ln_attn: (ParamId, ParamId),
    pub wq: ParamId,
    pub bq: ParamId,
    pub kv: Option<(ParamId, ParamId, ParamId, ParamId)>,
    pub ln_mlp: (ParamId, ParamId),
    pub fc1: ParamId,
    pub b1: ParamId,
    pub fc2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct MultiscaleIds {
    pub token: ParamId,
    pub layers: Vec<MultiscaleLayerIds>,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

#[derive(Clone, Copy)]
pub struct MultiscaleLayerVars {
    pub ln_attn: (Var, Var),
    pub wq: Var,
    pub bq: Var,
    pub kv: Option<(Var, Var, Var, Var)>,
    pub ln_mlp: (Var, Var),
    pub fc1: Var,
    pub b1: Var,
    pub fc2: Var,
    pub b2: Var,
}

pub struct MultiscaleVars {
    pub token: Var,
    pub layers: Vec<MultiscaleLayerVars>,
    pub out_w: Var,
    pub out_b: Var,
}

impl MultiscaleIds {
    pub fn bind(&self, b: &Bound) -> MultiscaleVars {
        MultiscaleVars {
            token: b.var(self.token),
            layers: self
                .layers
                .iter()
                .map(|l| MultiscaleLayerVars {
                    ln_attn: (b.var(l.ln_attn.0), b.var(l.ln_attn.1)),
                    wq: b.var(l.wq),
                    bq: b.var(l.bq),
                    kv: l.kv.map(|(wk, bk, wv, bv)| {
                        (b.var(wk), b.var(bk), b.var(wv), b.var(bv))
                    }),
                    ln_mlp: (b.var(l.ln_mlp.0), b.var(l.ln_mlp.1)),
                    fc1: b.var(l.fc1),
                    b1: b.var(l.b1),
                    fc2: b.var(l.fc2),
                    b2: b.var(l.b2),
                })
                .collect(),
            out_w: b.var(self.out_w),
            out_b: b.var(self.out_b),
        }
    }
}

/// Registers the aggregation token, per-layer attention/MLP weights, and a
/// zero-initialized output head (so the whole branch starts as an exact
/// zero contribution).
pub fn register_multiscale<E: Elem>(
    store: &mut ParamStore<E>,
    layers: usize,
    d: usize,
    projected: bool,
    rng: &mut ChaCha8Rng,
) -> MultiscaleIds {
    let token = store.add(
        "adaptation/multiscale/token",
        trunc_normal(rng, &[1, d], INIT_STD),
    );
    let ln = |store: &mut ParamStore<E>, name: String| {
        let g = store.add(format!("{name}/gamma"), Tensor::full(&[d], E::ONE));
        let b = store.add(format!("{name}/beta"), Tensor::zeros(&[d]));
        (g, b)
    };
    let layer_ids = (0..layers)
        .map(|l| {
            let p = format!("adaptation/multiscale/layer{l:02}");
            let ln_attn = ln(store, format!("{p}/ln_attn"));
            let wq = store.add(format!("{p}/q/weight"), trunc_normal(rng, &[d, d], INIT_STD));
            let bq = store.add(format!("{p}/q/bias"), Tensor::zeros(&[d]));
            let kv = projected.then(|| {
                let wk = store.add(format!("{p}/k/weight"), trunc_normal(rng, &[d, d], INIT_STD));
                let bk = store.add(format!("{p}/k/bias"), Tensor::zeros(&[d]));
                let wv = store.add(format!("{p}/v/weight"), trunc_normal(rng, &[d, d], INIT_STD));
                let bv = store.add(format!("{p}/v/bias"), Tensor::zeros(&[d]));
                (wk, bk, wv, bv)
            });
            let ln_mlp = ln(store, format!("{p}/ln_mlp"));
            let fc1 = store.add(
                format!("{p}/mlp/fc1/weight"),
                trunc_normal(rng, &[d, 4 * d], INIT_STD),
            );
            let b1 = store.add(format!("{p}/mlp/fc1/bias"), Tensor::zeros(&[4 * d]));
            let fc2 = store.add(
                format!("{p}/mlp/fc2/weight"),
                trunc_normal(rng, &[4 * d, d], INIT_STD),
            );
            let b2 = store.add(format!("{p}/mlp/fc2/bias"), Tensor::zeros(&[d]));
            MultiscaleLayerIds {
                ln_attn,
                wq,
                bq,
                kv,
                ln_mlp,
                fc1,
                b1,
                fc2,
                b2,
            }
        })
        .collect();
    let out_w = store.add("adaptation/multiscale/out/weight", Tensor::zeros(&[d, d]));
    let out_b = store.add("adaptation/multiscale/out/bias", Tensor::zeros(&[d]));
    MultiscaleIds {
        token,
        layers: layer_ids,
        out_w,
        out_b,
    }
}

/// The aggregation token replicated per frame: `[T, 1, d]`.
pub fn multiscale_init<E: Elem>(tape: &mut Tape<E>, ms: &MultiscaleVars, t: usize) -> Var {
    tape.tile0(ms.token, t)
}

/// One aggregation step against one backbone layer's tokens: single-query
/// cross-attention with residual, then a per-layer MLP with residual. In the
/// default mode keys/values are the normalized tokens themselves; only the
/// query is projected.
pub fn multiscale_step<E: Elem>(
    tape: &mut Tape<E>,
    x_mul: Var,
    z_l: Var,
    layer: &MultiscaleLayerVars,
) -> Var {
    let shape = tape.value(x_mul).shape().to_vec();
    let (t, d) = (shape[0], shape[2]);
    let n_tok = tape.value(z_l).shape()[1];
    let qn = tape.layer_norm(x_mul, layer.ln_attn.0, layer.ln_attn.1, LN_EPS);
    let kn = tape.layer_norm(z_l, layer.ln_attn.0, layer.ln_attn.1, LN_EPS);
    let qf = tape.reshape(qn, &[t, d]);
    let q = tape.matmul(qf, layer.wq);
    let q = tape.add_bias(q, layer.bq);
    let q = tape.reshape(q, &[t, 1, d]);
    let (k, v) = match layer.kv {
        Some((wk, bk, wv, bv)) => {
            let flat = tape.reshape(kn, &[t * n_tok, d]);
            let k = tape.matmul(flat, wk);
            let k = tape.add_bias(k, bk);
            let k = tape.reshape(k, &[t, n_tok, d]);
            let v = tape.matmul(flat, wv);
            let v = tape.add_bias(v, bv);
            let v = tape.reshape(v, &[t, n_tok, d]);
            (k, v)
        }
        None => (kn, kn),
    };
    let scores = tape.bmm_nt(q, k);
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let attn = tape.softmax_last(scores);
    let agg = tape.bmm(attn, v);
    let x = tape.add(x_mul, agg);
    let xn = tape.layer_norm(x, layer.ln_mlp.0, layer.ln_mlp.1, LN_EPS);
    let xf = tape.reshape(xn, &[t, d]);
    let h = tape.matmul(xf, layer.fc1);
    let h = tape.add_bias(h, layer.b1);
    let h = tape.gelu(h);
    let o = tape.matmul(h, layer.fc2);
    let o = tape.add_bias(o, layer.b2);
    let o = tape.reshape(o, &[t, 1, d]);
    tape.add(x, o)
}

/// Output head mapping the final aggregation token to a per-frame feature
/// `[T, d]`; zero at initialization.
pub fn multiscale_output<E: Elem>(tape: &mut Tape<E>, ms: &MultiscaleVars, x_mul: Var) -> Var {
    let shape = tape.value(x_mul).shape().to_vec();
    let (t, d) = (shape[0], shape[2]);
    let flat = tape.reshape(x_mul, &[t, d]);
    let out = tape.matmul(flat, ms.out_w);
    tape.add_bias(out, ms.out_b)
}

#[derive(Clone, Debug)]
pub struct CrossFrameIds {
    pub ln_q: (ParamId, ParamId),
    pub ln_k: (ParamId, ParamId),
}

#[derive(Clone, Copy)]
pub struct CrossFrameVars {
    pub ln_q: (Var, Var),
    pub ln_k: (Var, Var),
}

impl CrossFrameIds {
    pub fn bind(&self, b: &Bound) -> CrossFrameVars {
        CrossFrameVars {
            ln_q: (b.var(self.ln_q.0), b.var(self.ln_q.1)),
            ln_k: (b.var(self.ln_k.0), b.var(self.ln_k.1)),
        }
    }
}

pub fn register_cross_frame<E: Elem>(store: &mut ParamStore<E>, d: usize) -> CrossFrameIds {
    let ln = |store: &mut ParamStore<E>, name: &str| {
        let g = store.add(format!("{name}/gamma"), Tensor::full(&[d], E::ONE));
        let b = store.add(format!("{name}/beta"), Tensor::zeros(&[d]));
        (g, b)
    };
    CrossFrameIds {
        ln_q: ln(store, "adaptation/crossframe/ln_q"),
        ln_k: ln(store, "adaptation/crossframe/ln_k"),
    }
}

/// Zeroes the query-side norm parameters so every gate sits exactly at 1/2
/// and cross-frame aggregation becomes an exact identity.
pub fn neutralize_cross_frame<E: Elem>(store: &mut ParamStore<E>, ids: &CrossFrameIds) {
    let d = store.get(ids.ln_q.0).value.numel();
    store.get_mut(ids.ln_q.0).value = Tensor::zeros(&[d]);
    store.get_mut(ids.ln_q.1).value = Tensor::zeros(&[d]);
}

/// Frame indices contributing to frame `t`'s neighborhood, clamped at the
/// sequence boundaries.
pub fn neighborhood(t: usize, total: usize, tau: usize, bidirectional: bool) -> (usize, usize) {
    let lo = if bidirectional { t.saturating_sub(tau) } else { t };
    let hi = (t + tau).min(total - 1);
    (lo, hi)
}

/// Sigmoid-gated cross-frame aggregation. For each frame, patch tokens of
/// neighboring frames are gated by `sigmoid(LN(cls) . LN(patch)) - 0.5`,
/// averaged, and added to the frame's class feature. Gates at exactly 0.5
/// contribute nothing, so zeroing the query-side norm parameters makes this
/// an exact identity.
pub fn cross_frame_attention<E: Elem>(
    tape: &mut Tape<E>,
    cls: Var,
    patches: Var,
    cf: &CrossFrameVars,
    tau: usize,
    bidirectional: bool,
    mut trace: Option<&mut Vec<Tensor<E>>>,
) -> Var {
    let t_total = tape.value(cls).shape()[0];
    let shape = tape.value(patches).shape().to_vec();
    let (n, d) = (shape[1], shape[2]);
    debug_assert_eq!(shape[0], t_total);
    let qn = tape.layer_norm(cls, cf.ln_q.0, cf.ln_q.1, LN_EPS);
    let kn = tape.layer_norm(patches, cf.ln_k.0, cf.ln_k.1, LN_EPS);
    let kn_flat = tape.reshape(kn, &[t_total * n, d]);
    let raw_flat = tape.reshape(patches, &[t_total * n, d]);
    let mut rows = Vec::with_capacity(t_total);
    for t in 0..t_total {
        let (lo, hi) = neighborhood(t, t_total, tau, bidirectional);
        let count = (hi - lo + 1) * n;
        let idx: Vec<usize> = (lo..=hi).flat_map(|f| f * n..(f + 1) * n).collect();
        let keys_norm = tape.gather0(kn_flat, idx.clone());
        let keys_raw = tape.gather0(raw_flat, idx);
        let q = tape.gather0(qn, vec![t]);
        let logits = tape.matmul_nt(q, keys_norm);
        let gates = tape.sigmoid(logits);
        if let Some(tr) = trace.as_deref_mut() {
            let map = tape
                .value(gates)
                .reshaped(&[hi - lo + 1, n])
                .expect("gate count matches the neighborhood");
            tr.push(map);
        }
        let centered = tape.add_scalar(gates, -0.5);
        let agg = tape.matmul(centered, keys_raw);
        rows.push(tape.scale(agg, 1.0 / count as f64));
    }
    let agg = tape.concat0(&rows);
    tape.add(cls, agg)
}

/// Elementwise sum of the cross-frame and multiscale features.
pub fn fuse_frame_features<E: Elem>(tape: &mut Tape<E>, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (tape.value(a).shape().to_vec(), tape.value(b).shape().to_vec());
    if sa != sb {
        return Err(Error::DimensionMismatch {
            op: "fuse_frame_features",
            lhs: sa,
            rhs: sb,
        });
    }
    Ok(tape.add(a, b))
}

/// Ids for the complete adaptation stack attached to one backbone.
#[derive(Clone, Debug)]
pub struct AdaptIds {
    /// Per block: attention-side and FFN-side adapters.
    pub adapters: Vec<(AdapterIds, AdapterIds)>,
    pub prefix: PrefixIds,
    pub multiscale: MultiscaleIds,
    pub cross_frame: CrossFrameIds,
}

/// Bound variables for the whole adaptation stack, one entry per layer
/// where a component is per-layer.
pub struct AdaptVars {
    pub adapters: Vec<(AdapterVars, AdapterVars)>,
    /// `None` per layer when prefixing is disabled (`m = 0`).
    pub prefix: Vec<Option<Var>>,
    pub multiscale: MultiscaleVars,
    pub cross_frame: CrossFrameVars,
}

impl AdaptIds {
    pub fn bind(&self, b: &Bound) -> AdaptVars {
        let layers = self.adapters.len();
        let prefix = if self.prefix.per_layer.is_empty() {
            vec![None; layers]
        } else {
            self.prefix.per_layer.iter().map(|&id| Some(b.var(id))).collect()
        };
        AdaptVars {
            adapters: self
                .adapters
                .iter()
                .map(|(msa, ffn)| (msa.bind(b), ffn.bind(b)))
                .collect(),
            prefix,
            multiscale: self.multiscale.bind(b),
            cross_frame: self.cross_frame.bind(b),
        }
    }
}

pub fn register_adaptation<E: Elem>(
    store: &mut ParamStore<E>,
    layers: usize,
    d: usize,
    cfg: &AdaptConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AdaptIds> {
    cfg.validate()?;
    let adapters = (0..layers)
        .map(|l| {
            let msa = register_adapter(
                store,
                &format!("adaptation/block{l:02}/adapter_msa"),
                d,
                cfg.adapter_ratio,
                rng,
            );
            let ffn = register_adapter(
                store,
                &format!("adaptation/block{l:02}/adapter_ffn"),
                d,
                cfg.adapter_ratio,
                rng,
            );
            (msa, ffn)
        })
        .collect();
    let prefix = register_prefix(store, layers, d, cfg.prefix_len, cfg.prefix_shared, rng);
    let multiscale = register_multiscale(store, layers, d, cfg.multiscale_projected, rng);
    let cross_frame = register_cross_frame(store, d);
    Ok(AdaptIds {
        adapters,
        prefix,
        multiscale,
        cross_frame,
    })
}
