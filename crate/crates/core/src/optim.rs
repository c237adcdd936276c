//! Adam with decoupled weight decay, and global-norm gradient clipping.

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::tensor::ParamStore;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(alloc::string::String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl AdamConfig {
    pub fn with_lr(lr: f32, weight_decay: f32) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay }
    }
}

/// Per-tensor first and second moments plus the step counter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    /// Applies one update from the gradients stored in `params`.
    ///
    /// Fails without touching any parameter if a gradient is NaN or infinite.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<(), OptimError> {
        for (_, name, t) in params.iter() {
            if t.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(OptimError::NonFiniteGradient(name.into()));
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - libm::powf(c.beta1, self.step as f32);
        let bc2 = 1.0 - libm::powf(c.beta2, self.step as f32);
        let decay = 1.0 - c.lr * c.weight_decay;
        for (i, t) in params.tensors_mut().enumerate() {
            let Some(g) = t.grad().map(<[f32]>::to_vec) else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in t.data_mut().iter_mut().enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *p = *p * decay - c.lr * m_hat / (libm::sqrtf(v_hat) + c.eps);
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so that their global L2 norm is at most `max_norm`.
/// Returns the factor applied (1 when no clipping happened).
pub fn clip_gradients(params: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = params.grad_norm();
    if norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let scale = max_norm / norm;
    for t in params.tensors_mut() {
        if let Some(g) = t.grad_mut() {
            g.iter_mut().for_each(|v| *v = (f64::from(*v) * scale) as f32);
        }
    }
    scale
}
