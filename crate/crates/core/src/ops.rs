//! Eager tensor operations with validated shapes.
//!
//! These mirror the differentiable tape ops and are convenient for oracles,
//! data preparation and scoring paths that never need gradients.

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// `[m,k] x [k,n] -> [m,n]`
pub fn matmul<E: Elem>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::DimensionMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![E::ZERO; m * n];
    kernels::matmul_nn(a.data(), b.data(), m, k, n, &mut out);
    Tensor::new(vec![m, n], out)
}

/// Numerically stable softmax along `axis`.
pub fn softmax<E: Elem>(x: &Tensor<E>, axis: usize) -> Result<Tensor<E>> {
    if axis >= x.rank() {
        return Err(Error::Config(format!(
            "softmax axis {axis} out of range for shape {:?}",
            x.shape()
        )));
    }
    let shape = x.shape();
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut data = x.data().to_vec();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            let mut m = data[base];
            for a in 1..axis_len {
                m = m.max(data[base + a * inner]);
            }
            let mut total = E::ZERO;
            for a in 0..axis_len {
                let v = (data[base + a * inner] - m).exp();
                data[base + a * inner] = v;
                total += v;
            }
            for a in 0..axis_len {
                data[base + a * inner] = data[base + a * inner] / total;
            }
        }
    }
    Tensor::new(shape.to_vec(), data)
}

/// Layer normalization over the last axis with affine parameters.
pub fn layer_norm<E: Elem>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    eps: f64,
) -> Result<Tensor<E>> {
    let d = x.last_dim();
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::DimensionMismatch {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let epse = E::from_f64(eps);
    let inv_d = E::from_f64(1.0 / d as f64);
    let mut data = vec![E::ZERO; x.numel()];
    for (r, row) in x.data().chunks(d).enumerate() {
        let mean: E = row.iter().copied().sum::<E>() * inv_d;
        let var: E = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() * inv_d;
        let inv = E::ONE / (var + epse).sqrt();
        for (j, &v) in row.iter().enumerate() {
            data[r * d + j] = (v - mean) * inv * gamma.data()[j] + beta.data()[j];
        }
    }
    Tensor::new(x.shape().to_vec(), data)
}

/// Exact Gaussian-CDF GELU applied elementwise.
pub fn gelu<E: Elem>(x: &Tensor<E>) -> Tensor<E> {
    let half = E::from_f64(0.5);
    let inv_sqrt2 = E::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    let data = x
        .iter()
        .map(|&v| v * half * (E::ONE + (v * inv_sqrt2).erf()))
        .collect();
    Tensor::from_vec(x.shape(), data)
}
