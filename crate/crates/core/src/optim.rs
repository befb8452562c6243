//! AdamW with decoupled weight decay and a warmup-cosine schedule.

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Steps taken so far.
    pub t: u64,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
}

impl<T: Float> AdamW<T> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, t: 0, m: Vec::new(), v: Vec::new() }
    }

    /// First and second moments of parameter `i`, once it has been updated.
    pub fn moments(&self, i: usize) -> Option<(&Tensor<T>, &Tensor<T>)> {
        Some((self.m.get(i)?.as_ref()?, self.v.get(i)?.as_ref()?))
    }

    /// One update of every parameter that holds a gradient:
    /// `θ ← θ − lr·(m̂/(√v̂ + ε) + wd·θ)`, with the decay term only on
    /// parameters flagged for it.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        if params.iter().all(|p| p.grad.is_none()) {
            return Err(Error::Contract("optimizer step with no populated gradients".into()));
        }
        if let Some(p) = params.iter().find(|p| p.grad.as_ref().is_some_and(|g| g.shape() != p.value.shape())) {
            let g = p.grad.as_ref().expect("checked above");
            return Err(Error::Shape { op: "adamw_step", lhs: p.value.shape().to_vec(), rhs: g.shape().to_vec() });
        }
        self.m.resize(params.len(), None);
        self.v.resize(params.len(), None);
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(t));
        let c2 = T::of(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::of(self.lr), T::of(self.eps));
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = &p.grad else { continue };
            let wd = if p.decay { T::of(self.weight_decay) } else { T::zero() };
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let mut theta = (*p.value).clone();
            let it = theta.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((x, &g), (m, v)) in it {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *x = *x - lr * (m_hat / (v_hat.sqrt() + eps) + wd * *x);
            }
            p.value = theta.into();
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to `min_lr`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_epochs: f64,
    pub total_epochs: f64,
    pub min_lr: f64,
}

impl Schedule {
    pub fn new(base_lr: f64, warmup_epochs: f64, total_epochs: f64, min_lr: f64) -> Result<Self> {
        if !(0.0 <= warmup_epochs && warmup_epochs < total_epochs) {
            return Err(Error::Config(format!(
                "warmup epochs ({warmup_epochs}) must lie in [0, total epochs = {total_epochs})"
            )));
        }
        if !(0.0 <= min_lr && min_lr <= base_lr) {
            return Err(Error::Config(format!("min_lr ({min_lr}) must lie in [0, base_lr = {base_lr}]")));
        }
        Ok(Self { base_lr, warmup_epochs, total_epochs, min_lr })
    }

    /// Learning rate at a fractional epoch in `[0, total_epochs]`.
    pub fn lr_at(&self, epoch: f64) -> Result<f64> {
        if !(0.0..=self.total_epochs).contains(&epoch) {
            return Err(Error::Parameter(format!("epoch {epoch} outside [0, {}]", self.total_epochs)));
        }
        if epoch <= self.warmup_epochs && self.warmup_epochs > 0.0 {
            return Ok(self.base_lr * (epoch / self.warmup_epochs));
        }
        let progress = (epoch - self.warmup_epochs) / (self.total_epochs - self.warmup_epochs);
        Ok(self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}
