use indexmap::IndexMap;

use crate::autodiff::GradientMap;
use crate::error::{dim_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Linear warmup followed by cosine annealing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub base_lr: f64,
    pub min_lr: f64,
}

impl Schedule {
    pub fn new(warmup_steps: usize, total_steps: usize, base_lr: f64, min_lr: f64) -> Result<Self> {
        if warmup_steps > total_steps {
            return Err(Error::InvalidArgument(format!(
                "warmup_steps {warmup_steps} exceeds total_steps {total_steps}"
            )));
        }
        Ok(Self {
            warmup_steps,
            total_steps,
            base_lr,
            min_lr,
        })
    }
}

/// Learning rate at `step`: a linear ramp from 0 to `base_lr` over the
/// warmup, then `min_lr + ½(base_lr − min_lr)(1 + cos(π·progress))`.
/// Steps past `total_steps` stay at `min_lr`.
pub fn cosine_lr(step: usize, s: &Schedule) -> f64 {
    if step < s.warmup_steps {
        return s.base_lr * step as f64 / s.warmup_steps as f64;
    }
    let span = s.total_steps.saturating_sub(s.warmup_steps);
    let progress = if span == 0 {
        1.0
    } else {
        ((step - s.warmup_steps) as f64 / span as f64).min(1.0)
    };
    s.min_lr + 0.5 * (s.base_lr - s.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Layer-norm scales/shifts and biases are not decayed.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".bias") || name.ends_with(".gamma") || name.ends_with(".beta"))
}

#[derive(Debug, Clone)]
pub struct AdamWState<T = f32> {
    moments: IndexMap<String, (Tensor<T>, Tensor<T>)>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            moments: IndexMap::new(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn moments(&self, name: &str) -> Option<&(Tensor<T>, Tensor<T>)> {
        self.moments.get(name)
    }
}

/// One decoupled-weight-decay Adam update:
/// `θ ← θ − lr·(m̂ / (√v̂ + eps) + wd·θ)` with bias-corrected moments. The
/// decay term is skipped for names rejected by [`decays`].
pub fn adamw_step<T: Scalar>(
    params: &mut [(String, &mut Tensor<T>)],
    grads: &GradientMap<T>,
    state: &mut AdamWState<T>,
    lr: f64,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no gradient for parameter {name}")))?;
        if g.shape() != p.shape() {
            return Err(dim_err!(
                "adamw: gradient {:?} for {name} does not match parameter {:?}",
                g.shape(),
                p.shape()
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(state.beta1), T::of(state.beta2));
    let bc1 = T::of(1.0 - state.beta1.powi(t));
    let bc2 = T::of(1.0 - state.beta2.powi(t));
    let eps = T::of(state.eps);
    let lr_t = T::of(lr);
    for (name, p) in params.iter_mut() {
        let g = &grads[name.as_str()];
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (Tensor::zeros(p.shape().to_vec()), Tensor::zeros(p.shape().to_vec())));
        let wd = if decays(name) {
            T::of(state.weight_decay)
        } else {
            T::zero()
        };
        for (((theta, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *theta = *theta - lr_t * (m_hat / (v_hat.sqrt() + eps) + wd * *theta);
        }
    }
    Ok(())
}
