//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends a node holding the forward value and, when any
//! parent requires gradients, a backward closure. Calling [`Tape::backward`]
//! walks the nodes in reverse creation order and accumulates vector-Jacobian
//! products into per-node gradient buffers. Nodes whose inputs are all frozen
//! record no closure, so frozen submodels cost nothing on the backward pass.
//!
//! The tape also keeps an instrumented multiply-accumulate counter used to
//! cross-check the analytic cost formulas: matrix products charge their exact
//! MAC count, layer norm charges 3 per element, softmax variants charge 2 per
//! element, and pure elementwise work charges nothing.

use crate::elem::Elem;
use crate::kernels;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn<E> = Box<dyn Fn(&Tape<E>, &Tensor<E>, &mut GradBuf<E>)>;

struct Node<E: Elem> {
    value: Tensor<E>,
    requires_grad: bool,
    back: Option<BackFn<E>>,
}

/// Per-node gradient buffers populated during the backward sweep.
pub struct GradBuf<E: Elem> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Elem> GradBuf<E> {
    /// Mutable gradient slot for `v`, allocated zeroed on first use. Returns
    /// `None` when `v` does not require gradients so callers can skip the
    /// corresponding work entirely.
    fn slot<'a>(&'a mut self, tape: &Tape<E>, v: Var) -> Option<&'a mut [E]> {
        if !tape.nodes[v.0].requires_grad {
            return None;
        }
        let entry = &mut self.grads[v.0];
        if entry.is_none() {
            *entry = Some(Tensor::zeros(tape.nodes[v.0].value.shape()));
        }
        Some(entry.as_mut().unwrap().data_mut())
    }
}

/// Gradients returned by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<E: Elem> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Elem> Gradients<E> {
    /// Gradient of the objective with respect to `v`, if any was accumulated.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

pub struct Tape<E: Elem> {
    nodes: Vec<Node<E>>,
    macs: u64,
}

impl<E: Elem> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            macs: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate count charged by all forward ops so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            back: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn set_back(&mut self, v: Var, f: BackFn<E>) {
        self.nodes[v.0].back = Some(f);
    }

    fn any_requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.0].requires_grad)
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.push(value, requires_grad)
    }

    /// Input that never receives gradients.
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.push(value, false)
    }

    /// Reverse sweep from a scalar objective.
    pub fn backward(&self, root: Var) -> Gradients<E> {
        assert_eq!(
            self.nodes[root.0].value.numel(),
            1,
            "backward root must be scalar, got shape {:?}",
            self.nodes[root.0].value.shape()
        );
        let mut buf = GradBuf {
            grads: (0..self.nodes.len()).map(|_| None).collect(),
        };
        buf.grads[root.0] = Some(Tensor::scalar(E::ONE));
        for i in (0..=root.0).rev() {
            let Some(g) = buf.grads[i].take() else {
                continue;
            };
            if let Some(back) = &self.nodes[i].back {
                back(self, &g, &mut buf);
            }
            buf.grads[i] = Some(g);
        }
        Gradients { grads: buf.grads }
    }
}

// Elementwise and shape ops.
impl<E: Elem> Tape<E> {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(
            va.shape(),
            vb.shape(),
            "add shape mismatch: {:?} vs {:?}",
            va.shape(),
            vb.shape()
        );
        let data = va.iter().zip(vb.iter()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::from_vec(va.shape(), data);
        let req = self.any_requires(&[a, b]);
        let out = self.push(value, req);
        if req {
            self.set_back(
                out,
                Box::new(move |t, g, buf| {
                    for v in [a, b] {
                        if let Some(d) = buf.slot(t, v) {
                            for (o, &gi) in d.iter_mut().zip(g.iter()) {
                                *o += gi;
                            }
                        }
                    }
                }),
            );
        }
        out
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(
            va.shape(),
            vb.shape(),
            "sub shape mismatch: {:?} vs {:?}",
            va.shape(),
            vb.shape()
        );
        let data = va.iter().zip(vb.iter()).map(|(&x, &y)| x - y).collect();
        let value = Tensor::from_vec(va.shape(), data);
        let req = self.any_requires(&[a, b]);
        let out = self.push(value, req);
        if req {
            self.set_back(
                out,
                Box::new(move |t, g, buf| {
                    if let Some(d) = buf.slot(t, a) {
                        for (o, &gi) in d.iter_mut().zip(g.iter()) {
                            *o += gi;
                        }
                    }
                    if let Some(d) = buf.slot(t, b) {
                        for (o, &gi) in d.iter_mut().zip(g.iter()) {
                            *o -= gi;
                        }
                    }
                }),
            );
        }
        out
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(
            va.shape(),
            vb.shape(),
            "mul shape mismatch: {:?} vs {:?}",
            va.shape(),
            vb.shape()
        );
        let data = va.iter().zip(vb.iter()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::from_vec(va.shape(), data);
        let req = self.any_requires(&[a, b]);
        let out = self.push(value, req);
        if req {
            self.set_back(
                out,
                Box::new(move |t, g, buf| {
                    if let Some(d) = buf.slot(t, a) {
                        for ((o, &gi), &bi) in d.iter_mut().zip(g.iter()).zip(t.value(b).iter()) {
                            *o += gi * bi;
                        }
                    }
                    if let Some(d) = buf.slot(t, b) {
                        for ((o, &gi), &ai) in d.iter_mut().zip(g.iter()).zip(t.value(a).iter()) {
                            *o += gi * ai;
                        }
                    }
                }),
            );
        }
        out
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        let ce = E::from_f64(c);
        let data = va.iter().map(|&x| x * ce).collect();
        let value = Tensor::from_vec(va.shape(), data);
        let req = self.requires_grad(a);
        let out = self.push(value, req);
        if req {
            self.set_back(
                out,
                Box::new(move |t, g, buf| {
                    if let Some(d) = buf.slot(t, a) {
                        for (o, &gi) in d.iter_mut().zip(g.iter()) {
                            *o += gi * ce;
                        }
                    }
                }),
            );
        }
        out
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        let ce = E::from_f64(c);
        let data = va.iter().map(|&x| x + ce).collect();
        let value = Tensor::from_vec(va.shape(), data);
        let req = self.requires_grad(a);
        let out = self.push(value, req);
        if req {
            self.set_back(
                out,
                Box::new(move |t, g, buf| {
                    if let Some(d) = buf.slot(t, a) {
                        for (o, &gi) in d.iter_mut().zip(g.iter()) {
                            *o += gi;
                        }
                    }
                }),
            );
        }
        out
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let total: E = self.value(a).iter().copied().sum();
        let req = self.requires_grad(a);
        let out = self.push(Tensor::scalar(total), req);
        if req {
            self.set_back(
                out,
                Box::new(move |t, g, buf| {
                    let gi = g.item();
                    if let Some(d) = buf.slot(t, a) {
                        for o in d.iter_mut() {
                            *o += gi;
                        }
                    }
                }),
            );
        }
        out
    }

    /// Reinterpret `a` with a new shape of equal element count.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self
            .value(a)
            .reshaped(shape)
            .expect("reshape numel mismatch");
        let req = self.requires_grad(a);
        let out = self.push(value, req);
        if req {
            self.set_back(
                out,
                Box::new(move |t, g, buf| {
                    if let Some(d) = buf.slot(t, a) {
                        for (o, &gi) in d.iter_mut().zip(g.iter()) {
                            *o += gi;
                        }
                    }
                }),
            );
        }
        out
    }
}

// Matrix products.
impl<E: Elem> Tape<E> {
    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(
            va.rank() == 2 && vb.rank() == 2 && va.shape()[1] == vb.shape()[0],
            "matmul shape mismatch: {:?} vs {:?}",
            va.shape(),
            vb.shape()
        );
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut out_data = vec![E::ZERO; m * n];
        kernels::matmul_nn(va.data(), vb.data(), m, k, n, &mut out_data);
        self.macs += (m * k * n) as u64;
        let value = Tensor::from_vec(&[m, n], out_data);
        let req = self.any_requires(&[a, b]);
        let out = self.push(value, req);
        if req {
            self.set_back(
                out,
                Box::new(move |t, g, buf| {
                    if let Some(d) = buf.slot(t, a) {
                        kernels::matmul_nt(g.data(), t.value(b).data(), m, n, k, d);
                    }
                    if let Some(d) = buf.slot(t, b) {
                        kernels::matmul_tn(t.value(a).data(), g.data(), k, m, n, d);
                    }
                }),
            );
        }
        out
    }

    /// `[m,k] x [n,k]^T -> [m,n]`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(
            va.rank() == 2 && vb.rank() == 2 && va.shape()[1] == vb.shape()[1],
            "matmul_nt shape mismatch: {:?} vs {:?}",
            va.shape(),
            vb.shape()
        );
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[0]);
        let mut out_data = vec![E::ZERO; m * n];
        kernels::matmul_nt(va.data(), vb.data(), m, k, n, &mut out_data);
        self.macs += (m * k * n) as u64;
        let value = Tensor::from_vec(&[m, n], out_data);
        let req = self.any_requires(&[a, b]);
        let out = self.push(value, req);
        if req {
            self.set_back(
                out,
                Box::new(move |t, g, buf| {
                    if let Some(d) = buf.slot(t, a) {
                        kernels::matmul_nn(g.data(), t.value(b).data(), m, n, k, d);
                    }
                    if let Some(d) = buf.slot(t, b) {
                        kernels::matmul_tn(g.data(), t.value(a).data(), n, m, k, d);
                    }
                }),
            );
        }
        out
    }

    /// Batched `[B,m,k] x [B,k,n] -> [B,m,n]`
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(
            va.rank() == 3
                && vb.rank() == 3
                && va.shape()[0] == vb.shape()[0]
                && va.shape()[2] == vb.shape()[1],
            "bmm shape mismatch: {:?} vs {:?}",
            va.shape(),
            vb.shape()
        );
        let (bs, m, k, n) = (va.shape()[0], va.shape()[1], va.shape()[2], vb.shape()[2]);
        let mut out_data = vec![E::ZERO; bs * m * n];
        for i in 0..bs {
            kernels::matmul_nn(
                &va.data()[i * m * k..(i + 1) * m * k],
                &vb.data()[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                &mut out_data[i * m * n..(i + 1) * m * n],
            );
        }
        self.macs += (bs * m * k * n) as u64;
        let value = Tensor::from_vec(&[bs, m, n], out_data);
        let req = self.any_requires(&[a, b]);
        let out = self.push(value, req);
        if req {
            self.set_back(
                out,
                Box::new(move |t, g, buf| {
                    if let Some(d) = buf.slot(t, a) {
                        for i in 0..bs {
                            kernels::matmul_nt(
                                &g.data()[i * m * n..(i + 1) * m * n],
                                &t.value(b).data()[i * k * n..(i + 1) * k * n],
                                m,
                                n,
                                k,
                                &mut d[i * m * k..(i + 1) * m * k],
                            );
                        }
                    }
                    if let Some(d) = buf.slot(t, b) {
                        for i in 0..bs {
                            kernels::matmul_tn(
                                &t.value(a).data()[i * m * k..(i + 1) * m * k],
                                &g.data()[i * m * n..(i + 1) * m * n],
                                k,
                                m,
                                n,
                                &mut d[i * k * n..(i + 1) * k * n],
                            );
                        }
                    }
                }),
            );
        }
        out
    }

    /// Batched `[B,m,k] x [B,n,k]^T -> [B,m,n]`
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(
            va.rank() == 3
                && vb.rank() == 3
                && va.shape()[0] == vb.shape()[0]
                && va.shape()[2] == vb.shape()[2],
            "bmm_nt shape mismatch: {:?} vs {:?}",
            va.shape(),
            vb.shape()
        );
        let (bs, m, k, n) = (va.shape()[0], va.shape()[1], va.shape()[2], vb.shape()[1]);
        let mut out_data = vec![E::ZERO; bs * m * n];
        for i in 0..bs {
            kernels::matmul_nt(
                &va.data()[i * m * k..(i + 1) * m * k],
                &vb.data()[i * n * k..(i + 1) * n * k],
                m,
                k,
                n,
                &mut out_data[i * m * n..(i + 1) * m * n],
            );
        }
        self.macs += (bs * m * k * n) as u64;
        let value = Tensor::from_vec(&[bs, m, n], out_data);
        let req = self.any_requires(&[a, b]);
        let out = self.push(value, req);
        if req {
            self.set_back(
                out,
                Box::new(move |t, g, buf| {
                    if let Some(d) = buf.slot(t, a) {
                        for i in 0..bs {
                            kernels::matmul_nn(
                                &g.data()[i * m * n..(i + 1) * m * n],
                                &t.value(b).data()[i * n * k..(i + 1) * n * k],
                                m,
                                n,
                                k,
                                &mut d[i * m * k..(i + 1) * m * k],
                            );
                        }
                    }
                    if let Some(d) = buf.slot(t, b) {
                        for i in 0..bs {
                            kernels::matmul_tn(
                                &g.data()[i * m * n..(i + 1) * m * n],
                                &t.value(a).data()[i * m * k..(i + 1) * m * k],
                                n,
                                m,
                                k,
                                &mut d[i * n * k..(i + 1) * n * k],
                            );
                        }
                    }
                }),
            );
        }
        out
    }
}

// Broadcasting, concatenation and indexing.
impl<E: Elem> Tape<E> {
    /// `[rows..., d] + [d]` with the bias broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(b));
        let d = vx.last_dim();
        assert_eq!(
            vb.shape(),
            &[d],
            "add_bias shape mismatch: {:?} vs {:?}",
            vx.shape(),
            vb.shape()
        );
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(d) {
            for (o, &bi) in row.iter_mut().zip(vb.iter()) {
                *o += bi;
            }
        }
        let value = Tensor::from_vec(vx.shape(), data);
        let req = self.any_requires(&[x, b]);
        let out = self.push(value, req);
        if req {
            self.set_back(
                out,
                Box::new(move |t, g, buf| {
                    if let Some(dst) = buf.slot(t, x) {
                        for (o, &gi) in dst.iter_mut().zip(g.iter()) {
                            *o += gi;
                        }
                    }
                    if let Some(dst) = buf.slot(t, b) {
                        let d = t.value(b).numel();
                        for row in g.data().chunks(d) {
                            for (o, &gi) in dst.iter_mut().zip(row) {
                                *o += gi;
                            }
                        }
                    }
                }),
            );
        }
        out
    }

    /// `[B, rest...] + [rest...]` with `y` broadcast over the leading axis.
    pub fn add_broadcast0(&mut self, x: Var, y: Var) -> Var {
        let (vx, vy) = (self.value(x), self.value(y));
        assert!(
            vx.rank() == vy.rank() + 1 && &vx.shape()[1..] == vy.shape(),
            "add_broadcast0 shape mismatch: {:?} vs {:?}",
            vx.shape(),
            vy.shape()
        );
        let block = vy.numel();
        let mut data = vx.data().to_vec();
        for chunk in data.chunks_mut(block) {
            for (o, &yi) in chunk.iter_mut().zip(vy.iter()) {
                *o += yi;
            }
        }
        let value = Tensor::from_vec(vx.shape(), data);
        let req = self.any_requires(&[x, y]);
        let out = self.push(value, req);
        if req {
            self.set_back(
                out,
                Box::new(move |t, g, buf| {
                    if let Some(dst) = buf.slot(t, x) {
                        for (o, &gi) in dst.iter_mut().zip(g.iter()) {
                            *o += gi;
                        }
                    }
                    if let Some(dst) = buf.slot(t, y) {
                        let block = t.value(y).numel();
                        for chunk in g.data().chunks(block) {
                            for (o, &gi) in dst.iter_mut().zip(chunk) {
                                *o += gi;
                            }
                        }
                    }
                }),
            );
        }
        out
    }

    /// Repeat `y` along a new leading axis: `[rest...] -> [b, rest...]`.
    pub fn tile0(&mut self, y: Var, b: usize) -> Var {
        assert!(b > 0, "tile0 needs a positive repeat count");
        let vy = self.value(y);
        let mut shape = vec![b];
        shape.extend_from_slice(vy.shape());
        let mut data = Vec::with_capacity(b * vy.numel());
        for _ in 0..b {
            data.extend_from_slice(vy.data());
        }
        let value = Tensor::from_vec(&shape, data);
        let req = self.requires_grad(y);
        let out = self.push(value, req);
        if req {
            self.set_back(
                out,
                Box::new(move |t, g, buf| {
                    if let Some(dst) = buf.slot(t, y) {
                        let block = t.value(y).numel();
                        for chunk in g.data().chunks(block) {
                            for (o, &gi) in dst.iter_mut().zip(chunk) {
                                *o += gi;
                            }
                        }
                    }
                }),
            );
        }
        out
    }

    /// Concatenate along the leading axis.
    pub fn concat0(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat0 needs at least one part");
        let rest: Vec<usize> = self.value(parts[0]).shape()[1..].to_vec();
        let mut dim0 = 0;
        let mut data = Vec::new();
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(
                &vp.shape()[1..],
                rest.as_slice(),
                "concat0 shape mismatch: {:?} vs [_, {:?}]",
                vp.shape(),
                rest
            );
            dim0 += vp.shape()[0];
            data.extend_from_slice(vp.data());
        }
        let mut shape = vec![dim0];
        shape.extend_from_slice(&rest);
        let value = Tensor::from_vec(&shape, data);
        let req = self.any_requires(parts);
        let out = self.push(value, req);
        if req {
            let parts = parts.to_vec();
            self.set_back(
                out,
                Box::new(move |t, g, buf| {
                    let mut offset = 0;
                    for &p in &parts {
                        let len = t.value(p).numel();
                        if let Some(dst) = buf.slot(t, p) {
                            for (o, &gi) in dst.iter_mut().zip(&g.data()[offset..offset + len]) {
                                *o += gi;
                            }
                        }
                        offset += len;
                    }
                }),
            );
        }
        out
    }

    /// Concatenate rank-3 tensors along axis 1.
    pub fn concat1(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat1 needs at least one part");
        let first = self.value(parts[0]).shape().to_vec();
        assert_eq!(first.len(), 3, "concat1 expects rank-3 parts, got {first:?}");
        let (b, d) = (first[0], first[2]);
        let mut mids = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            assert!(
                s.len() == 3 && s[0] == b && s[2] == d,
                "concat1 shape mismatch: {:?} vs {:?}",
                s,
                first
            );
            mids.push(s[1]);
        }
        let mid_total: usize = mids.iter().sum();
        let mut data = Vec::with_capacity(b * mid_total * d);
        for bi in 0..b {
            for (&p, &mid) in parts.iter().zip(&mids) {
                let vp = self.value(p);
                data.extend_from_slice(&vp.data()[bi * mid * d..(bi + 1) * mid * d]);
            }
        }
        let value = Tensor::from_vec(&[b, mid_total, d], data);
        let req = self.any_requires(parts);
        let out = self.push(value, req);
        if req {
            let parts = parts.to_vec();
            self.set_back(
                out,
                Box::new(move |t, g, buf| {
                    let row = mid_total * d;
                    for bi in 0..b {
                        let mut offset = bi * row;
                        for &p in &parts {
                            let mid = t.value(p).shape()[1];
                            let len = mid * d;
                            if let Some(dst) = buf.slot(t, p) {
                                let seg = &g.data()[offset..offset + len];
                                for (o, &gi) in dst[bi * len..(bi + 1) * len].iter_mut().zip(seg) {
                                    *o += gi;
                                }
                            }
                            offset += len;
                        }
                    }
                }),
            );
        }
        out
    }

    /// Concatenate along the last axis; all other extents must match.
    pub fn concat_last(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_last needs at least one part");
        let lead: Vec<usize> = {
            let s = self.value(parts[0]).shape();
            s[..s.len() - 1].to_vec()
        };
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            assert_eq!(
                &s[..s.len() - 1],
                lead.as_slice(),
                "concat_last shape mismatch: {:?} vs [{:?}, _]",
                s,
                lead
            );
            widths.push(*s.last().unwrap());
        }
        let width_total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * width_total);
        for r in 0..rows {
            for &p in parts.iter() {
                let vp = self.value(p);
                let w = vp.last_dim();
                data.extend_from_slice(&vp.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.clone();
        shape.push(width_total);
        let value = Tensor::from_vec(&shape, data);
        let req = self.any_requires(parts);
        let out = self.push(value, req);
        if req {
            let parts = parts.to_vec();
            let widths = widths.clone();
            self.set_back(
                out,
                Box::new(move |t, g, buf| {
                    for (pi, &p) in parts.iter().enumerate() {
                        let w = widths[pi];
                        let before: usize = widths[..pi].iter().sum();
                        if let Some(dst) = buf.slot(t, p) {
                            for r in 0..rows {
                                let src = &g.data()[r * width_total + before..r * width_total + before + w];
                                for (o, &gi) in dst[r * w..(r + 1) * w].iter_mut().zip(src) {
                                    *o += gi;
                                }
                            }
                        }
                    }
                }),
            );
        }
        out
    }

    /// Slice `len` indices of the last axis starting at `start`.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        let d = vx.last_dim();
        assert!(
            start + len <= d && len > 0,
            "slice_last [{start}, {start}+{len}) out of bounds for last dim {d}"
        );
        let rows = vx.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&vx.data()[r * d + start..r * d + start + len]);
        }
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Tensor::from_vec(&shape, data);
        let req = self.requires_grad(x);
        let out = self.push(value, req);
        if req {
            self.set_back(
                out,
                Box::new(move |t, g, buf| {
                    if let Some(dst) = buf.slot(t, x) {
                        let d = t.value(x).last_dim();
                        for r in 0..rows {
                            let src = &g.data()[r * len..(r + 1) * len];
                            for (o, &gi) in dst[r * d + start..r * d + start + len]
                                .iter_mut()
                                .zip(src)
                            {
                                *o += gi;
                            }
                        }
                    }
                }),
            );
        }
        out
    }

    /// Slice `len` blocks of the leading axis starting at `start`.
    pub fn slice0(&mut self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        let d0 = vx.shape()[0];
        assert!(
            start + len <= d0 && len > 0,
            "slice0 [{start}, {start}+{len}) out of bounds for leading dim {d0}"
        );
        let block = vx.numel() / d0;
        let data = vx.data()[start * block..(start + len) * block].to_vec();
        let mut shape = vx.shape().to_vec();
        shape[0] = len;
        let value = Tensor::from_vec(&shape, data);
        let req = self.requires_grad(x);
        let out = self.push(value, req);
        if req {
            self.set_back(
                out,
                Box::new(move |t, g, buf| {
                    if let Some(dst) = buf.slot(t, x) {
                        let block = t.value(x).numel() / t.value(x).shape()[0];
                        for (o, &gi) in dst[start * block..(start + len) * block]
                            .iter_mut()
                            .zip(g.iter())
                        {
                            *o += gi;
                        }
                    }
                }),
            );
        }
        out
    }

    /// Gather blocks of the leading axis by index; indices may repeat.
    pub fn gather0(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let vx = self.value(x);
        let d0 = vx.shape()[0];
        assert!(!idx.is_empty(), "gather0 needs at least one index");
        assert!(
            idx.iter().all(|&i| i < d0),
            "gather0 index out of bounds for leading dim {d0}: {idx:?}"
        );
        let block = vx.numel() / d0;
        let mut data = Vec::with_capacity(idx.len() * block);
        for &i in &idx {
            data.extend_from_slice(&vx.data()[i * block..(i + 1) * block]);
        }
        let mut shape = vx.shape().to_vec();
        shape[0] = idx.len();
        let value = Tensor::from_vec(&shape, data);
        let req = self.requires_grad(x);
        let out = self.push(value, req);
        if req {
            self.set_back(
                out,
                Box::new(move |t, g, buf| {
                    if let Some(dst) = buf.slot(t, x) {
                        let block = t.value(x).numel() / t.value(x).shape()[0];
                        for (k, &i) in idx.iter().enumerate() {
                            let src = &g.data()[k * block..(k + 1) * block];
                            for (o, &gi) in dst[i * block..(i + 1) * block].iter_mut().zip(src) {
                                *o += gi;
                            }
                        }
                    }
                }),
            );
        }
        out
    }

    /// Single element of a rank-2 tensor as a `[1]` scalar.
    pub fn select2(&mut self, x: Var, row: usize, col: usize) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.rank(), 2, "select2 expects rank 2, got {:?}", vx.shape());
        let (r, c) = (vx.shape()[0], vx.shape()[1]);
        assert!(row < r && col < c, "select2 ({row},{col}) out of bounds for [{r},{c}]");
        let value = Tensor::scalar(vx.data()[row * c + col]);
        let req = self.requires_grad(x);
        let out = self.push(value, req);
        if req {
            self.set_back(
                out,
                Box::new(move |t, g, buf| {
                    if let Some(dst) = buf.slot(t, x) {
                        let c = t.value(x).shape()[1];
                        dst[row * c + col] += g.item();
                    }
                }),
            );
        }
        out
    }
}

// Nonlinearities and normalization.
impl<E: Elem> Tape<E> {
    /// Exact Gaussian-CDF GELU: `x * Phi(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let half = E::from_f64(0.5);
        let inv_sqrt2 = E::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let data = vx
            .iter()
            .map(|&v| v * half * (E::ONE + (v * inv_sqrt2).erf()))
            .collect();
        let value = Tensor::from_vec(vx.shape(), data);
        let req = self.requires_grad(x);
        let out = self.push(value, req);
        if req {
            self.set_back(
                out,
                Box::new(move |t, g, buf| {
                    if let Some(dst) = buf.slot(t, x) {
                        let half = E::from_f64(0.5);
                        let inv_sqrt2 = E::from_f64(std::f64::consts::FRAC_1_SQRT_2);
                        let inv_sqrt_2pi = E::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                        for ((o, &gi), &v) in dst.iter_mut().zip(g.iter()).zip(t.value(x).iter()) {
                            let phi_cdf = half * (E::ONE + (v * inv_sqrt2).erf());
                            let pdf = inv_sqrt_2pi * (-(v * v) * half).exp();
                            *o += gi * (phi_cdf + v * pdf);
                        }
                    }
                }),
            );
        }
        out
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data = vx
            .iter()
            .map(|&v| E::ONE / (E::ONE + (-v).exp()))
            .collect();
        let value = Tensor::from_vec(vx.shape(), data);
        let req = self.requires_grad(x);
        let out = self.push(value, req);
        if req {
            self.set_back(
                out,
                Box::new(move |t, g, buf| {
                    let y = t.value(out).data();
                    if let Some(dst) = buf.slot(t, x) {
                        for ((o, &gi), &yi) in dst.iter_mut().zip(g.iter()).zip(y) {
                            *o += gi * yi * (E::ONE - yi);
                        }
                    }
                }),
            );
        }
        out
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data = vx.iter().map(|&v| v.tanh()).collect();
        let value = Tensor::from_vec(vx.shape(), data);
        let req = self.requires_grad(x);
        let out = self.push(value, req);
        if req {
            self.set_back(
                out,
                Box::new(move |t, g, buf| {
                    let y = t.value(out).data();
                    if let Some(dst) = buf.slot(t, x) {
                        for ((o, &gi), &yi) in dst.iter_mut().zip(g.iter()).zip(y) {
                            *o += gi * (E::ONE - yi * yi);
                        }
                    }
                }),
            );
        }
        out
    }

    /// Row-stable softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let d = vx.last_dim();
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(d) {
            let m = row.iter().copied().fold(row[0], E::max);
            let mut total = E::ZERO;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        let value = Tensor::from_vec(vx.shape(), data);
        self.macs += 2 * value.numel() as u64;
        let req = self.requires_grad(x);
        let out = self.push(value, req);
        if req {
            self.set_back(
                out,
                Box::new(move |t, g, buf| {
                    let y = t.value(out);
                    let d = y.last_dim();
                    if let Some(dst) = buf.slot(t, x) {
                        for r in 0..y.rows() {
                            let yr = &y.data()[r * d..(r + 1) * d];
                            let gr = &g.data()[r * d..(r + 1) * d];
                            let dot: E = yr.iter().zip(gr).map(|(&yi, &gi)| yi * gi).sum();
                            for ((o, &yi), &gi) in
                                dst[r * d..(r + 1) * d].iter_mut().zip(yr).zip(gr)
                            {
                                *o += yi * (gi - dot);
                            }
                        }
                    }
                }),
            );
        }
        out
    }

    /// Row-stable log-softmax over the last axis.
    pub fn log_softmax_last(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let d = vx.last_dim();
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(d) {
            let m = row.iter().copied().fold(row[0], E::max);
            let total: E = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + total.ln();
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        let value = Tensor::from_vec(vx.shape(), data);
        self.macs += 2 * value.numel() as u64;
        let req = self.requires_grad(x);
        let out = self.push(value, req);
        if req {
            self.set_back(
                out,
                Box::new(move |t, g, buf| {
                    let y = t.value(out);
                    let d = y.last_dim();
                    if let Some(dst) = buf.slot(t, x) {
                        for r in 0..y.rows() {
                            let yr = &y.data()[r * d..(r + 1) * d];
                            let gr = &g.data()[r * d..(r + 1) * d];
                            let gsum: E = gr.iter().copied().sum();
                            for ((o, &yi), &gi) in
                                dst[r * d..(r + 1) * d].iter_mut().zip(yr).zip(gr)
                            {
                                *o += gi - yi.exp() * gsum;
                            }
                        }
                    }
                }),
            );
        }
        out
    }

    /// Layer normalization over the last axis with learnable affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = vx.last_dim();
        assert!(
            vg.shape() == [d] && vb.shape() == [d],
            "layer_norm affine shape mismatch: x {:?}, gamma {:?}, beta {:?}",
            vx.shape(),
            vg.shape(),
            vb.shape()
        );
        let epse = E::from_f64(eps);
        let inv_d = E::from_f64(1.0 / d as f64);
        let mut data = vec![E::ZERO; vx.numel()];
        for (r, row) in vx.data().chunks(d).enumerate() {
            let mean: E = row.iter().copied().sum::<E>() * inv_d;
            let var: E = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<E>()
                * inv_d;
            let inv = E::ONE / (var + epse).sqrt();
            for (j, &v) in row.iter().enumerate() {
                data[r * d + j] = (v - mean) * inv * vg.data()[j] + vb.data()[j];
            }
        }
        let value = Tensor::from_vec(vx.shape(), data);
        self.macs += 3 * value.numel() as u64;
        let req = self.any_requires(&[x, gamma, beta]);
        let out = self.push(value, req);
        if req {
            self.set_back(
                out,
                Box::new(move |t, g, buf| {
                    let vx = t.value(x);
                    let vg = t.value(gamma);
                    let d = vx.last_dim();
                    let inv_d = E::from_f64(1.0 / d as f64);
                    let epse = E::from_f64(eps);
                    // Recompute per-row statistics; cheaper than caching for
                    // the small rows used here.
                    for r in 0..vx.rows() {
                        let row = &vx.data()[r * d..(r + 1) * d];
                        let gr = &g.data()[r * d..(r + 1) * d];
                        let mean: E = row.iter().copied().sum::<E>() * inv_d;
                        let var: E = row
                            .iter()
                            .map(|&v| (v - mean) * (v - mean))
                            .sum::<E>()
                            * inv_d;
                        let inv = E::ONE / (var + epse).sqrt();
                        if let Some(dst) = buf.slot(t, gamma) {
                            for (j, (&gi, &v)) in gr.iter().zip(row).enumerate() {
                                dst[j] += gi * (v - mean) * inv;
                            }
                        }
                        if let Some(dst) = buf.slot(t, beta) {
                            for (j, &gi) in gr.iter().enumerate() {
                                dst[j] += gi;
                            }
                        }
                        if let Some(dst) = buf.slot(t, x) {
                            let mut dxh_mean = E::ZERO;
                            let mut dxh_xhat_mean = E::ZERO;
                            for (j, (&gi, &v)) in gr.iter().zip(row).enumerate() {
                                let dxh = gi * vg.data()[j];
                                let xhat = (v - mean) * inv;
                                dxh_mean += dxh;
                                dxh_xhat_mean += dxh * xhat;
                            }
                            dxh_mean *= inv_d;
                            dxh_xhat_mean *= inv_d;
                            for (j, (&gi, &v)) in gr.iter().zip(row).enumerate() {
                                let dxh = gi * vg.data()[j];
                                let xhat = (v - mean) * inv;
                                dst[r * d + j] += inv * (dxh - dxh_mean - xhat * dxh_xhat_mean);
                            }
                        }
                    }
                }),
            );
        }
        out
    }

    /// Stable log-sum-exp of scalar inputs.
    pub fn logsumexp(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "logsumexp needs at least one input");
        let xs: Vec<E> = parts
            .iter()
            .map(|&p| {
                let v = self.value(p);
                assert_eq!(v.numel(), 1, "logsumexp inputs must be scalar");
                v.item()
            })
            .collect();
        let m = xs.iter().copied().fold(xs[0], E::max);
        let total: E = xs.iter().map(|&v| (v - m).exp()).sum();
        let value = Tensor::scalar(m + total.ln());
        let req = self.any_requires(parts);
        let out = self.push(value, req);
        if req {
            let parts = parts.to_vec();
            self.set_back(
                out,
                Box::new(move |t, g, buf| {
                    let y = t.value(out).item();
                    let gi = g.item();
                    for &p in &parts {
                        let xi = t.value(p).item();
                        if let Some(dst) = buf.slot(t, p) {
                            dst[0] += gi * (xi - y).exp();
                        }
                    }
                }),
            );
        }
        out
    }

    /// Max pooling with kernel 2 and stride 2 over the leading (time) axis of
    /// a rank-2 tensor. Ties route gradients to the earlier frame.
    pub fn maxpool0_k2(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.rank(), 2, "maxpool0_k2 expects rank 2, got {:?}", vx.shape());
        let (tdim, d) = (vx.shape()[0], vx.shape()[1]);
        let t_out = tdim / 2;
        assert!(t_out > 0, "maxpool0_k2 needs at least 2 rows, got {tdim}");
        let mut data = Vec::with_capacity(t_out * d);
        let mut argmax = Vec::with_capacity(t_out * d);
        for to in 0..t_out {
            let a = &vx.data()[2 * to * d..(2 * to + 1) * d];
            let b = &vx.data()[(2 * to + 1) * d..(2 * to + 2) * d];
            for j in 0..d {
                if b[j] > a[j] {
                    data.push(b[j]);
                    argmax.push((2 * to + 1) * d + j);
                } else {
                    data.push(a[j]);
                    argmax.push(2 * to * d + j);
                }
            }
        }
        let value = Tensor::from_vec(&[t_out, d], data);
        let req = self.requires_grad(x);
        let out = self.push(value, req);
        if req {
            self.set_back(
                out,
                Box::new(move |t, g, buf| {
                    if let Some(dst) = buf.slot(t, x) {
                        for (&src_idx, &gi) in argmax.iter().zip(g.iter()) {
                            dst[src_idx] += gi;
                        }
                    }
                }),
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_of_product_matches_hand_derivative() {
        // f(a, b) = sum(a * b); df/da = b, df/db = a.
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]), true);
        let b = tape.leaf(Tensor::from_vec(&[3], vec![4.0, 5.0, 6.0]), true);
        let p = tape.mul(a, b);
        let f = tape.sum_all(p);
        let grads = tape.backward(f);
        assert_eq!(grads.wrt(a).unwrap().data(), &[4.0, 5.0, 6.0]);
        assert_eq!(grads.wrt(b).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn frozen_leaves_accumulate_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::scalar(2.0), false);
        let b = tape.leaf(Tensor::scalar(3.0), true);
        let p = tape.mul(a, b);
        let grads = tape.backward(p);
        assert!(grads.wrt(a).is_none());
        assert_eq!(grads.wrt(b).unwrap().item(), 2.0);
    }

    #[test]
    fn matmul_gradients_match_transposed_products() {
        // d/dA sum(A B) = ones * B^T, d/dB = A^T * ones.
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]), true);
        let b = tape.leaf(Tensor::from_vec(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]), true);
        let c = tape.matmul(a, b);
        let f = tape.sum_all(c);
        let grads = tape.backward(f);
        assert_eq!(grads.wrt(a).unwrap().data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(grads.wrt(b).unwrap().data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn gather_with_repeated_indices_sums_gradients() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]), true);
        let g = tape.gather0(x, vec![0, 0, 1]);
        assert_eq!(tape.value(g).shape(), &[3, 2]);
        let f = tape.sum_all(g);
        let grads = tape.backward(f);
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn maxpool_ties_prefer_the_earlier_frame() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[2, 1], vec![5.0, 5.0]), true);
        let y = tape.maxpool0_k2(x);
        assert_eq!(tape.value(y).data(), &[5.0]);
        let grads = tape.backward(y);
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(&[2, 3], vec![0.0, 1.0, -2.0, 10.0, 10.0, 10.0]));
        let y = tape.softmax_last(x);
        for r in 0..2 {
            let s: f64 = tape.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mac_counter_charges_matrix_products_exactly() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[3, 5]));
        let b = tape.constant(Tensor::zeros(&[5, 7]));
        let _ = tape.matmul(a, b);
        assert_eq!(tape.macs(), 3 * 5 * 7);
    }
}
