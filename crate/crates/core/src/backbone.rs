//! Vision-transformer spatial extractor.
//!
//! A stack of pre-norm transformer blocks over patch tokens plus a class
//! token. The backbone is typically frozen; optional per-block hooks insert
//! adapter branches and key/value prefixes without touching this code path's
//! operation order, so a hook that contributes exact zeros reproduces the
//! plain forward bit for bit.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::{adapter_forward, AdapterVars};
use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::params::{trunc_normal, Bound, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// Backbone geometry. `heads` must divide `dim`, `patch` must divide `image`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub patch: usize,
    pub image: usize,
}

impl ViTConfig {
    /// ViT-B/16 geometry at 224x224, used for cost accounting.
    pub fn b16_full() -> Self {
        ViTConfig {
            layers: 12,
            dim: 768,
            heads: 12,
            patch: 16,
            image: 224,
        }
    }

    /// Small geometry sized so full training runs finish in minutes on a CPU.
    pub fn desk() -> Self {
        ViTConfig {
            layers: 4,
            dim: 64,
            heads: 4,
            patch: 8,
            image: 32,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "b16-full" => Ok(Self::b16_full()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!(
                "unknown backbone preset {other:?}; expected \"b16-full\" or \"desk\""
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.dim == 0 || self.heads == 0 || self.patch == 0 {
            return Err(Error::Config(format!("all extents must be positive: {self:?}")));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads ({}) must divide dim ({})",
                self.heads, self.dim
            )));
        }
        if self.image % self.patch != 0 {
            return Err(Error::Config(format!(
                "patch ({}) must divide image side ({})",
                self.patch, self.image
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image / self.patch
    }

    /// Patch count n.
    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Token count n+1 (class token at index 0).
    pub fn tokens(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn ffn_hidden(&self) -> usize {
        4 * self.dim
    }

    /// Flattened patch vector length (3 channels).
    pub fn patch_dim(&self) -> usize {
        3 * self.patch * self.patch
    }
}

/// Which parameter subset trains. Serializes as the same lowercase string
/// the CLI accepts: `frozen`, `full`, `partial(n)`, `adaptsign`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    /// Backbone frozen; only the sequence head trains.
    Frozen,
    /// Everything trains.
    Full,
    /// Only the last n backbone blocks train (plus the sequence head).
    Partial(usize),
    /// Backbone frozen; adaptation modules and sequence head train.
    AdaptSign,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Regime::Frozen => write!(f, "frozen"),
            Regime::Full => write!(f, "full"),
            Regime::Partial(n) => write!(f, "partial({n})"),
            Regime::AdaptSign => write!(f, "adaptsign"),
        }
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozen" => Ok(Regime::Frozen),
            "full" => Ok(Regime::Full),
            "adaptsign" => Ok(Regime::AdaptSign),
            other => {
                if let Some(inner) = other.strip_prefix("partial(").and_then(|r| r.strip_suffix(')')) {
                    let n = inner.parse::<usize>().map_err(|_| {
                        Error::Config(format!("bad partial block count in {other:?}"))
                    })?;
                    Ok(Regime::Partial(n))
                } else {
                    Err(Error::Config(format!(
                        "unknown regime {other:?}; expected frozen, full, partial(n), or adaptsign"
                    )))
                }
            }
        }
    }
}

impl Serialize for Regime {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Regime {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Parameter handles for one transformer block.
#[derive(Clone, Debug)]
pub struct BlockIds {
    pub ln1: (ParamId, ParamId),
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2: (ParamId, ParamId),
    pub fc1: ParamId,
    pub b1: ParamId,
    pub fc2: ParamId,
    pub b2: ParamId,
}

/// Parameter handles for the whole backbone.
#[derive(Clone, Debug)]
pub struct BackboneIds {
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<BlockIds>,
    pub final_ln: (ParamId, ParamId),
}

const INIT_STD: f64 = 0.02;

fn linear_init<E: Elem>(
    store: &mut ParamStore<E>,
    rng: &mut ChaCha8Rng,
    name: &str,
    rows: usize,
    cols: usize,
) -> (ParamId, ParamId) {
    let w = store.add(format!("{name}/weight"), trunc_normal(rng, &[rows, cols], INIT_STD));
    let b = store.add(format!("{name}/bias"), Tensor::zeros(&[cols]));
    (w, b)
}

fn ln_init<E: Elem>(store: &mut ParamStore<E>, name: &str, d: usize) -> (ParamId, ParamId) {
    let g = store.add(format!("{name}/gamma"), Tensor::full(&[d], E::ONE));
    let b = store.add(format!("{name}/beta"), Tensor::zeros(&[d]));
    (g, b)
}

/// Registers all backbone parameters under the `backbone/` prefix and returns
/// their handles. Registration order fixes checkpoint layout.
pub fn register_backbone<E: Elem>(
    store: &mut ParamStore<E>,
    cfg: &ViTConfig,
    rng: &mut ChaCha8Rng,
) -> Result<BackboneIds> {
    cfg.validate()?;
    let d = cfg.dim;
    let (patch_w, patch_b) = linear_init(store, rng, "backbone/patch_embed", cfg.patch_dim(), d);
    let cls = store.add("backbone/cls_token", trunc_normal(rng, &[1, d], INIT_STD));
    let pos = store.add(
        "backbone/pos_embed",
        trunc_normal(rng, &[cfg.tokens(), d], INIT_STD),
    );
    let mut blocks = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let p = format!("backbone/block{l:02}");
        let ln1 = ln_init(store, &format!("{p}/ln1"), d);
        let (wq, bq) = linear_init(store, rng, &format!("{p}/attn/q"), d, d);
        let (wk, bk) = linear_init(store, rng, &format!("{p}/attn/k"), d, d);
        let (wv, bv) = linear_init(store, rng, &format!("{p}/attn/v"), d, d);
        let (wo, bo) = linear_init(store, rng, &format!("{p}/attn/out"), d, d);
        let ln2 = ln_init(store, &format!("{p}/ln2"), d);
        let (fc1, b1) = linear_init(store, rng, &format!("{p}/mlp/fc1"), d, cfg.ffn_hidden());
        let (fc2, b2) = linear_init(store, rng, &format!("{p}/mlp/fc2"), cfg.ffn_hidden(), d);
        blocks.push(BlockIds {
            ln1,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            ln2,
            fc1,
            b1,
            fc2,
            b2,
        });
    }
    let final_ln = ln_init(store, "backbone/final_ln", d);
    Ok(BackboneIds {
        patch_w,
        patch_b,
        cls,
        pos,
        blocks,
        final_ln,
    })
}

/// Sets backbone trainability for a regime. Parameters outside `backbone/`
/// (adaptation modules, sequence head) always remain trainable.
pub fn set_trainability<E: Elem>(
    store: &mut ParamStore<E>,
    cfg: &ViTConfig,
    regime: Regime,
) -> Result<()> {
    match regime {
        Regime::Frozen | Regime::AdaptSign => store.set_trainable_by_prefix("backbone/", false),
        Regime::Full => store.set_trainable_by_prefix("backbone/", true),
        Regime::Partial(n) => {
            if n > cfg.layers {
                return Err(Error::Config(format!(
                    "partial({n}) exceeds backbone depth {}",
                    cfg.layers
                )));
            }
            store.set_trainable_by_prefix("backbone/", false);
            for l in cfg.layers - n..cfg.layers {
                store.set_trainable_by_prefix(&format!("backbone/block{l:02}/"), true);
            }
        }
    }
    Ok(())
}

/// Per-block hooks: adapter branches on both sub-blocks plus an optional
/// key/value prefix `[m, d]`.
#[derive(Clone, Copy, Default)]
pub struct BlockHooks<'a> {
    pub msa_adapter: Option<&'a AdapterVars>,
    pub ffn_adapter: Option<&'a AdapterVars>,
    pub prefix: Option<Var>,
}

/// Bound tape handles for one block.
#[derive(Clone, Copy)]
pub struct BlockVars {
    pub ln1: (Var, Var),
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2: (Var, Var),
    pub fc1: Var,
    pub b1: Var,
    pub fc2: Var,
    pub b2: Var,
}

pub struct BackboneVars {
    pub patch_w: Var,
    pub patch_b: Var,
    pub cls: Var,
    pub pos: Var,
    pub blocks: Vec<BlockVars>,
    pub final_ln: (Var, Var),
}

impl BackboneIds {
    pub fn bind(&self, b: &Bound) -> BackboneVars {
        BackboneVars {
            patch_w: b.var(self.patch_w),
            patch_b: b.var(self.patch_b),
            cls: b.var(self.cls),
            pos: b.var(self.pos),
            blocks: self
                .blocks
                .iter()
                .map(|blk| BlockVars {
                    ln1: (b.var(blk.ln1.0), b.var(blk.ln1.1)),
                    wq: b.var(blk.wq),
                    bq: b.var(blk.bq),
                    wk: b.var(blk.wk),
                    bk: b.var(blk.bk),
                    wv: b.var(blk.wv),
                    bv: b.var(blk.bv),
                    wo: b.var(blk.wo),
                    bo: b.var(blk.bo),
                    ln2: (b.var(blk.ln2.0), b.var(blk.ln2.1)),
                    fc1: b.var(blk.fc1),
                    b1: b.var(blk.b1),
                    fc2: b.var(blk.fc2),
                    b2: b.var(blk.b2),
                })
                .collect(),
            final_ln: (b.var(self.final_ln.0), b.var(self.final_ln.1)),
        }
    }
}

/// Per-head attention weights recorded from one block, each
/// `[T, tokens, prefix+tokens]`.
pub struct BlockTrace<E: Elem> {
    pub attn: Vec<Tensor<E>>,
}

/// Flattens `[T, 3, s, s]` frames into a `[T*n, 3*p*p]` patch matrix
/// (channel-major within a patch).
pub fn patchify<E: Elem>(cfg: &ViTConfig, frames: &Tensor<E>) -> Result<Tensor<E>> {
    let s = cfg.image;
    let expect_tail = [3, s, s];
    if frames.rank() != 4 || frames.shape()[1..] != expect_tail {
        let t = frames.shape().first().copied().unwrap_or(1);
        return Err(Error::DimensionMismatch {
            op: "patchify",
            lhs: frames.shape().to_vec(),
            rhs: vec![t, 3, s, s],
        });
    }
    let t = frames.shape()[0];
    if t == 0 {
        return Err(Error::SequenceTooShort { got: 0, min: 1 });
    }
    let (g, p) = (cfg.grid(), cfg.patch);
    let mut out = Vec::with_capacity(t * cfg.n_patches() * cfg.patch_dim());
    let f = frames.data();
    let frame_stride = 3 * s * s;
    for ti in 0..t {
        for gy in 0..g {
            for gx in 0..g {
                for c in 0..3 {
                    for py in 0..p {
                        let row = gy * p + py;
                        let base = ti * frame_stride + c * s * s + row * s + gx * p;
                        out.extend_from_slice(&f[base..base + p]);
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(&[t * cfg.n_patches(), cfg.patch_dim()], out))
}

/// Patch projection + class token + positional embedding: `[T,3,s,s]` frames
/// to `[T, tokens, d]`.
pub fn embed_frames<E: Elem>(
    tape: &mut Tape<E>,
    cfg: &ViTConfig,
    vars: &BackboneVars,
    frames: &Tensor<E>,
) -> Result<Var> {
    let patches = patchify(cfg, frames)?;
    let t = frames.shape()[0];
    let px = tape.constant(patches);
    let proj = tape.matmul(px, vars.patch_w);
    let proj = tape.add_bias(proj, vars.patch_b);
    let proj = tape.reshape(proj, &[t, cfg.n_patches(), cfg.dim]);
    let cls = tape.tile0(vars.cls, t);
    let tokens = tape.concat1(&[cls, proj]);
    let out = tape.add_broadcast0(tokens, vars.pos);
    Ok(out)
}

/// Attention sub-block: `z + MSA(LN(z))`, plus an adapter branch reading the
/// pre-norm input and an optional key/value prefix shared across heads.
pub fn attention_sub_block<E: Elem>(
    tape: &mut Tape<E>,
    cfg: &ViTConfig,
    blk: &BlockVars,
    z: Var,
    hooks: Option<&BlockHooks>,
    trace: Option<&mut BlockTrace<E>>,
) -> Var {
    let shape = tape.value(z).shape().to_vec();
    let (t, n, d) = (shape[0], shape[1], shape[2]);
    debug_assert_eq!(d, cfg.dim);
    let zn = tape.layer_norm(z, blk.ln1.0, blk.ln1.1, LN_EPS);
    let flat = tape.reshape(zn, &[t * n, d]);
    let q = tape.matmul(flat, blk.wq);
    let q = tape.add_bias(q, blk.bq);
    let q = tape.reshape(q, &[t, n, d]);
    let k = tape.matmul(flat, blk.wk);
    let k = tape.add_bias(k, blk.bk);
    let k = tape.reshape(k, &[t, n, d]);
    let v = tape.matmul(flat, blk.wv);
    let v = tape.add_bias(v, blk.bv);
    let v = tape.reshape(v, &[t, n, d]);

    let prefix = hooks.and_then(|h| h.prefix);
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut attn_maps = Vec::new();
    for h in 0..cfg.heads {
        let qh = tape.slice_last(q, h * dh, dh);
        let mut kh = tape.slice_last(k, h * dh, dh);
        let mut vh = tape.slice_last(v, h * dh, dh);
        if let Some(p) = prefix {
            let ph = tape.slice_last(p, h * dh, dh);
            let ph = tape.tile0(ph, t);
            kh = tape.concat1(&[ph, kh]);
            vh = tape.concat1(&[ph, vh]);
        }
        let scores = tape.bmm_nt(qh, kh);
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax_last(scores);
        if trace.is_some() {
            attn_maps.push(tape.value(attn).clone());
        }
        heads.push(tape.bmm(attn, vh));
    }
    if let Some(tr) = trace {
        tr.attn = attn_maps;
    }
    let merged = tape.concat_last(&heads);
    let merged = tape.reshape(merged, &[t * n, d]);
    let proj = tape.matmul(merged, blk.wo);
    let proj = tape.add_bias(proj, blk.bo);
    let proj = tape.reshape(proj, &[t, n, d]);
    let mut out = tape.add(z, proj);
    if let Some(ad) = hooks.and_then(|h| h.msa_adapter) {
        let delta = adapter_forward(tape, z, ad);
        out = tape.add(out, delta);
    }
    out
}

/// FFN sub-block: `z + FFN(LN(z))`, plus an adapter branch on the pre-norm
/// input.
pub fn ffn_sub_block<E: Elem>(
    tape: &mut Tape<E>,
    _cfg: &ViTConfig,
    blk: &BlockVars,
    z: Var,
    hooks: Option<&BlockHooks>,
) -> Var {
    let shape = tape.value(z).shape().to_vec();
    let (t, n, d) = (shape[0], shape[1], shape[2]);
    let zn = tape.layer_norm(z, blk.ln2.0, blk.ln2.1, LN_EPS);
    let flat = tape.reshape(zn, &[t * n, d]);
    let h1 = tape.matmul(flat, blk.fc1);
    let h1 = tape.add_bias(h1, blk.b1);
    let h1 = tape.gelu(h1);
    let h2 = tape.matmul(h1, blk.fc2);
    let h2 = tape.add_bias(h2, blk.b2);
    let h2 = tape.reshape(h2, &[t, n, d]);
    let mut out = tape.add(z, h2);
    if let Some(ad) = hooks.and_then(|h| h.ffn_adapter) {
        let delta = adapter_forward(tape, z, ad);
        out = tape.add(out, delta);
    }
    out
}

/// One full transformer block (attention then FFN sub-block).
pub fn vit_block_forward<E: Elem>(
    tape: &mut Tape<E>,
    cfg: &ViTConfig,
    blk: &BlockVars,
    z: Var,
    hooks: Option<&BlockHooks>,
    trace: Option<&mut BlockTrace<E>>,
) -> Var {
    let z1 = attention_sub_block(tape, cfg, blk, z, hooks, trace);
    ffn_sub_block(tape, cfg, blk, z1, hooks)
}

/// Everything the rest of the model consumes from the backbone.
pub struct BackboneOut<E: Elem> {
    /// Token features after each block, each `[T, tokens, d]`.
    pub layers: Vec<Var>,
    /// Class-token features after the final layer norm, `[T, d]`.
    pub cls: Var,
    /// Post-final-norm tokens `[T, tokens, d]` (patch rows feed cross-frame
    /// attention).
    pub final_tokens: Var,
    /// Last block's attention weights when requested.
    pub trace: Option<BlockTrace<E>>,
}

/// Runs the full backbone over a frame stack.
pub fn backbone_forward<E: Elem>(
    tape: &mut Tape<E>,
    cfg: &ViTConfig,
    vars: &BackboneVars,
    frames: &Tensor<E>,
    hooks: &[Option<BlockHooks>],
    want_trace: bool,
) -> Result<BackboneOut<E>> {
    assert!(
        hooks.is_empty() || hooks.len() == cfg.layers,
        "hooks must be empty or one entry per layer"
    );
    let mut z = embed_frames(tape, cfg, vars, frames)?;
    let t = frames.shape()[0];
    let mut layers = Vec::with_capacity(cfg.layers);
    let mut trace = None;
    for (l, blk) in vars.blocks.iter().enumerate() {
        let h = hooks.get(l).and_then(|h| h.as_ref());
        let last = l + 1 == cfg.layers;
        let tr = if want_trace && last {
            trace = Some(BlockTrace { attn: Vec::new() });
            trace.as_mut()
        } else {
            None
        };
        z = vit_block_forward(tape, cfg, blk, z, h, tr);
        layers.push(z);
    }
    let zf = tape.layer_norm(z, vars.final_ln.0, vars.final_ln.1, LN_EPS);
    let n = cfg.tokens();
    let flat = tape.reshape(zf, &[t * n, cfg.dim]);
    let cls_idx: Vec<usize> = (0..t).map(|ti| ti * n).collect();
    let cls = tape.gather0(flat, cls_idx);
    Ok(BackboneOut {
        layers,
        cls,
        final_tokens: zf,
        trace,
    })
}

/// Patch rows of a `[T, tokens, d]` token tensor as `[T, n, d]`.
pub fn patch_rows<E: Elem>(tape: &mut Tape<E>, tokens: Var) -> Var {
    let shape = tape.value(tokens).shape().to_vec();
    let (t, n_tok, d) = (shape[0], shape[1], shape[2]);
    let flat = tape.reshape(tokens, &[t * n_tok, d]);
    let mut idx = Vec::with_capacity(t * (n_tok - 1));
    for ti in 0..t {
        for p in 1..n_tok {
            idx.push(ti * n_tok + p);
        }
    }
    let rows = tape.gather0(flat, idx);
    tape.reshape(rows, &[t, n_tok - 1, d])
}
