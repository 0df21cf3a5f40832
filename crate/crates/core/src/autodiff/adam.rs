use super::array::Array;
use super::nn::ParamSet;
use crate::error::{EraError, Result};

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the joint gradient to this L2 norm when it is exceeded.
    pub max_grad_norm: Option<f64>,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: None,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn with_max_grad_norm(mut self, norm: f64) -> Self {
        self.max_grad_norm = Some(norm);
        self
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update; `grads` must follow the [`ParamSet`] order.
    pub fn step<P: ParamSet + ?Sized>(&mut self, params: &mut P, grads: &[Array]) -> Result<()> {
        let mut ps = params.params_mut();
        if ps.len() != grads.len() {
            return Err(EraError::DimensionMismatch {
                context: "adam step",
                expected: ps.len(),
                got: grads.len(),
            });
        }
        for (p, g) in ps.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(EraError::ShapeMismatch {
                    op: "adam step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        if self.m.is_empty() {
            self.m = ps.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        let clip = match self.max_grad_norm {
            Some(max) => {
                let norm = grads
                    .iter()
                    .flat_map(|g| g.data())
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in ps
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (k, x) in p.data_mut().iter_mut().enumerate() {
                let gk = g.data()[k] * clip;
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                *x -= self.lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
