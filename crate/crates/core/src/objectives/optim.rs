use std::f64::consts::PI;

use crate::model::Model;
use crate::tensor::Real;

/// Linear warmup over `warmup` steps, then cosine decay to zero at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize, warmup: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let t = ((step - warmup) as f64 / span as f64).min(1.0);
    base * 0.5 * (1.0 + (PI * t).cos())
}

/// Scales gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [Option<Vec<T>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|x| x.f64() * x.f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x = *x * s);
        }
    }
    norm
}

/// Adam with decoupled weight decay. Decay applies only to matrices
/// (rank ≥ 2); biases, gains and embeddings stored as vectors are exempt.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: Vec<u64>,
}

impl AdamW {
    pub fn new<T: Real>(model: &Model<T>, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: model.params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            v: model.params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            steps: vec![0; model.params.len()],
        }
    }

    /// One update; parameters with `None` gradient are left untouched.
    /// `lr_for(i)` gives the learning rate of parameter `i`.
    pub fn step<T: Real>(
        &mut self,
        model: &mut Model<T>,
        grads: &[Option<Vec<T>>],
        lr_for: impl Fn(usize) -> f64,
    ) {
        for (i, (param, grad)) in model.params.iter_mut().zip(grads).enumerate() {
            let Some(grad) = grad else { continue };
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let lr = lr_for(i);
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let decay = if param.value.shape().len() >= 2 {
                self.weight_decay
            } else {
                0.0
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, w) in param.value.data_mut().iter_mut().enumerate() {
                let g = grad[k].f64();
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let update = (m[k] / bc1) / ((v[k] / bc2).sqrt() + self.eps);
                let x = w.f64();
                *w = T::of(x - lr * (update + decay * x));
            }
        }
    }
}
