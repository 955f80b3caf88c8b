//! First-order optimizers shared by the surrogate trainers: Adam with
//! optional decoupled weight decay, and a cosine-annealed learning-rate
//! schedule.
//!
//! The optimizer operates on flat `f64` parameter vectors; callers pack and
//! unpack their model structures around it. Coupled L2 regularization (a
//! prior term that belongs to the objective) is the caller's business — it
//! goes into the gradient — whereas `weight_decay` here is the decoupled
//! kind applied directly to the parameters after the Adam update.

use nalgebra::DVector;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay: after the Adam step, parameters shrink by
    /// `lr_t * weight_decay * theta`. Zero for plain Adam.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn with_weight_decay(lr: f64, weight_decay: f64) -> Self {
        AdamConfig {
            weight_decay,
            ..AdamConfig::new(lr)
        }
    }
}

/// Adam state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: DVector<f64>,
    v: DVector<f64>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, dim: usize) -> Self {
        Adam {
            cfg,
            m: DVector::zeros(dim),
            v: DVector::zeros(dim),
            t: 0,
        }
    }

    /// One update of `params` given `grad`, with the configured learning rate
    /// multiplied by `lr_scale` (the schedule hook; pass 1.0 for a constant
    /// rate).
    pub fn step(&mut self, params: &mut DVector<f64>, grad: &DVector<f64>, lr_scale: f64) {
        debug_assert_eq!(params.len(), grad.len());
        debug_assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let lr = self.cfg.lr * lr_scale;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bias1 = 1.0 - b1.powi(self.t as i32);
        let bias2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let m_hat = self.m[i] / bias1;
            let v_hat = self.v[i] / bias2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            if self.cfg.weight_decay > 0.0 {
                params[i] -= lr * self.cfg.weight_decay * params[i];
            }
        }
    }
}

/// Cosine annealing from the base rate down to zero over `total` steps:
/// scale(t) = 0.5 * (1 + cos(pi * t / total)). `t` counts completed steps,
/// so the first step runs at the full rate.
pub fn cosine_scale(step: u64, total: u64) -> f64 {
    if total == 0 {
        return 1.0;
    }
    let frac = (step.min(total) as f64) / (total as f64);
    0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}
