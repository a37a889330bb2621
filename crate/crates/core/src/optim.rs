//! AdamW with bias correction and decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::tensor::{Result, Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(TensorError::InvalidHyperparameter(what.to_string()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight decay must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AdamW<F> {
    config: AdamWConfig,
    step: u64,
    first: Vec<Tensor<F>>,
    second: Vec<Tensor<F>>,
    decay: Vec<bool>,
}

impl<F: Scalar> AdamW<F> {
    /// `decay[i]` selects whether parameter `i` receives weight decay.
    pub fn new(config: AdamWConfig, shapes: &[Vec<usize>], decay: Vec<bool>) -> Result<Self> {
        config.validate()?;
        if decay.len() != shapes.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adamw",
                left: vec![shapes.len()],
                right: vec![decay.len()],
            });
        }
        let zeros = |s: &Vec<usize>| Tensor::zeros(s.clone());
        Ok(Self {
            config,
            step: 0,
            first: shapes.iter().map(zeros).collect(),
            second: shapes.iter().map(zeros).collect(),
            decay,
        })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<F>], &[Tensor<F>]) {
        (&self.first, &self.second)
    }

    pub fn restore(
        &mut self,
        step: u64,
        first: Vec<Tensor<F>>,
        second: Vec<Tensor<F>>,
    ) -> Result<()> {
        for ((m, v), cur) in first.iter().zip(&second).zip(&self.first) {
            if m.shape() != cur.shape() || v.shape() != cur.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adamw restore",
                    left: cur.shape().to_vec(),
                    right: m.shape().to_vec(),
                });
            }
        }
        if first.len() != self.first.len() || second.len() != self.second.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adamw restore",
                left: vec![self.first.len()],
                right: vec![first.len()],
            });
        }
        self.step = step;
        self.first = first;
        self.second = second;
        Ok(())
    }

    /// Applies one update at learning rate `lr` (the schedule lives with the
    /// caller). Nothing is modified if any shape or gradient is invalid.
    pub fn step(&mut self, params: &mut [Tensor<F>], grads: &[Tensor<F>], lr: f64) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adamw",
                left: vec![self.first.len()],
                right: vec![params.len(), grads.len()],
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.shape() != m.shape() || g.shape() != m.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adamw",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(TensorError::NonFinite {
                op: "optimizer gradient",
                node: i,
            });
        }

        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (F::from_f64(c.beta1), F::from_f64(c.beta2));
        let (one_b1, one_b2) = (F::from_f64(1.0 - c.beta1), F::from_f64(1.0 - c.beta2));
        let step_size = F::from_f64(lr / bc1);
        let bc2_sqrt = F::from_f64(bc2.sqrt());
        let eps = F::from_f64(c.eps);

        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let shrink = if self.decay[i] {
                F::from_f64(1.0 - lr * c.weight_decay)
            } else {
                F::one()
            };
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let denom = v.sqrt() / bc2_sqrt + eps;
                *p = *p * shrink - step_size * *m / denom;
            }
        }
        Ok(())
    }
}
