use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{ParamStore, Scalar, Tensor};

/// Adam with bias correction and no weight decay.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        Self::with_betas(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(params: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = |t: &Tensor<T>| Tensor::zeros(t.rows(), t.cols());
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            first: params.tensors().iter().map(zeros).collect(),
            second: params.tensors().iter().map(zeros).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor<T>] {
        &self.second
    }

    /// Applies one update. Non-finite gradients abort before anything is mutated.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "adam: {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("adam: learning rate {lr}")));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape("adam_step", &p.shape(), &g.shape()));
            }
            if !g.is_finite() {
                return Err(Error::Divergence(format!("non-finite gradient for {name}")));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(t));
        let c2 = T::lit(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::lit(lr), T::lit(self.eps));
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr`, then half-cosine decay to zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_epochs: u32,
    pub total_epochs: u32,
}

impl LrSchedule {
    pub fn new(base_lr: f64, warmup_epochs: u32, total_epochs: u32) -> Result<Self> {
        if !(base_lr > 0.0 && base_lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("base_lr must be positive, got {base_lr}")));
        }
        if total_epochs == 0 || warmup_epochs > total_epochs {
            return Err(Error::InvalidArgument(format!(
                "schedule needs 0 < total_epochs ({total_epochs}) and warmup_epochs ({warmup_epochs}) <= total_epochs"
            )));
        }
        Ok(Self {
            base_lr,
            warmup_epochs,
            total_epochs,
        })
    }

    /// Learning rate at fractional epoch `progress`, clamped into `[0, total_epochs]`.
    pub fn lr_at(&self, progress: f64) -> f64 {
        let total = f64::from(self.total_epochs);
        let warmup = f64::from(self.warmup_epochs);
        let p = progress.clamp(0.0, total);
        if p < warmup {
            return self.base_lr * p / warmup;
        }
        if total == warmup {
            return self.base_lr;
        }
        let frac = (p - warmup) / (total - warmup);
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}
