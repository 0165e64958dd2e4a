//! Adam optimizer with coupled L2 weight decay.
//!
//! Weight decay is added to the raw gradient before the moment updates, the
//! classic formulation rather than the decoupled variant. Bias correction
//! divides both moments by `1 - beta^t`.

use crate::elem::Elem;
use crate::error::Result;
use crate::params::{check_positive, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moment buffers aligned with a [`ParamStore`].
pub struct AdamState<E: Elem> {
    m: Vec<Tensor<E>>,
    v: Vec<Tensor<E>>,
    step: u64,
}

impl<E: Elem> AdamState<E> {
    pub fn new(store: &ParamStore<E>) -> Self {
        let m = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect::<Vec<_>>();
        let v = m.clone();
        AdamState { m, v, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One optimizer step. `grads` is aligned with the store by index; `None`
    /// entries (frozen or unreached parameters) are skipped.
    pub fn step(
        &mut self,
        store: &mut ParamStore<E>,
        grads: &[Option<Tensor<E>>],
        cfg: &AdamConfig,
    ) -> Result<()> {
        check_positive("learning rate", cfg.lr)?;
        assert_eq!(grads.len(), store.len(), "gradient/store length mismatch");
        self.step += 1;
        let t = self.step as i32;
        let corr1 = 1.0 - cfg.beta1.powi(t);
        let corr2 = 1.0 - cfg.beta2.powi(t);
        let b1 = E::from_f64(cfg.beta1);
        let b2 = E::from_f64(cfg.beta2);
        let one_m_b1 = E::from_f64(1.0 - cfg.beta1);
        let one_m_b2 = E::from_f64(1.0 - cfg.beta2);
        let wd = E::from_f64(cfg.weight_decay);
        let lr = E::from_f64(cfg.lr);
        let eps = E::from_f64(cfg.eps);
        let ic1 = E::from_f64(1.0 / corr1);
        let ic2 = E::from_f64(1.0 / corr2);

        for (i, (_, p)) in store.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            if !p.trainable {
                continue;
            }
            assert_eq!(
                g.shape(),
                p.value.shape(),
                "gradient shape mismatch for {}",
                p.name
            );
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((w, &gi), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let grad = gi + wd * *w;
                *mi = b1 * *mi + one_m_b1 * grad;
                *vi = b2 * *vi + one_m_b2 * grad * grad;
                let m_hat = *mi * ic1;
                let v_hat = *vi * ic2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
