//! Named parameter storage shared by all model components.
//!
//! Parameters are registered in construction order under slash-separated
//! names (`backbone/block0/wq`, `adaptation/prefix/layer2`, `seq/conv1/w`).
//! That order is the canonical serialization order for checkpoints, and the
//! name prefixes drive per-component parameter counting.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

pub struct Param<E: Elem> {
    pub name: String,
    pub value: Tensor<E>,
    pub trainable: bool,
}

pub struct ParamStore<E: Elem> {
    entries: Vec<Param<E>>,
}

impl<E: Elem> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<E>) -> ParamId {
        let name = name.into();
        assert!(
            self.entries.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(Param {
            name,
            value,
            trainable: true,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<E> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<E> {
        &mut self.entries[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<E>)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<E>)> {
        self.entries
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|p| p.name == name)
            .map(ParamId)
    }

    /// Total scalar count across all parameters.
    pub fn total_params(&self) -> u64 {
        self.entries.iter().map(|p| p.value.numel() as u64).sum()
    }

    /// Scalar count over parameters whose name starts with `prefix`.
    pub fn params_with_prefix(&self, prefix: &str) -> u64 {
        self.entries
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.numel() as u64)
            .sum()
    }

    /// Scalar count over trainable parameters only.
    pub fn trainable_params(&self) -> u64 {
        self.entries
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel() as u64)
            .sum()
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.entries {
            p.trainable = trainable;
        }
    }

    pub fn set_trainable_by_prefix(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.entries {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    /// Names of all trainable parameters, in registration order.
    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.name.clone())
            .collect()
    }
}

/// Parameters bound onto a tape for one forward/backward pass.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Register every parameter as a tape leaf. When `with_grad` is false the
    /// whole model runs as constants (pure inference).
    pub fn bind<E: Elem>(store: &ParamStore<E>, tape: &mut Tape<E>, with_grad: bool) -> Bound {
        let vars = store
            .entries
            .iter()
            .map(|p| tape.leaf(p.value.clone(), with_grad && p.trainable))
            .collect();
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Binds with caller-supplied variables for selected parameters (used by
    /// finite-difference checks, which must own the leaves being wiggled);
    /// everything else becomes a constant.
    pub fn bind_with<E: Elem>(
        store: &ParamStore<E>,
        tape: &mut Tape<E>,
        mut override_for: impl FnMut(ParamId, &Param<E>) -> Option<Var>,
    ) -> Bound {
        let vars = store
            .entries
            .iter()
            .enumerate()
            .map(|(i, p)| {
                override_for(ParamId(i), p).unwrap_or_else(|| tape.leaf(p.value.clone(), false))
            })
            .collect();
        Bound { vars }
    }

    /// Gradients re-aligned to store order, ready for the optimizer.
    pub fn collect_grads<E: Elem>(&self, grads: &Gradients<E>) -> Vec<Option<Tensor<E>>> {
        self.vars.iter().map(|&v| grads.wrt(v).cloned()).collect()
    }
}

/// Truncated normal init: gaussian samples re-drawn until they fall within
/// two standard deviations.
pub fn trunc_normal<E: Elem>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<E> {
    let normal = Normal::new(0.0f64, std).expect("positive std");
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| loop {
            let x = normal.sample(rng);
            if x.abs() <= 2.0 * std {
                break E::from_f64(x);
            }
        })
        .collect();
    Tensor::from_vec(shape, data)
}

pub fn uniform<E: Elem>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<E> {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| E::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data)
}

/// Validates a learning-rate-bearing config value.
pub fn check_positive(name: &str, value: f64) -> Result<()> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive, got {value}")))
    }
}
