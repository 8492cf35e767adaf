//! Adaptive-moment gradient descent with decoupled parameter groups.

use std::collections::BTreeMap;

use ndarray::Array2;

/// Adam with L2 weight decay folded into the gradient. Moments are keyed by
/// parameter name and persist for the optimizer's lifetime (never reset).
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub moments: BTreeMap<String, (Array2<f64>, Array2<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Apply one update to every `(name, param, grad)` triple.
    pub fn step(&mut self, updates: Vec<(String, &mut Array2<f64>, Array2<f64>)>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, param, grad) in updates {
            let grad = if self.weight_decay > 0.0 {
                grad + &param.mapv(|v| v * self.weight_decay)
            } else {
                grad
            };
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (Array2::zeros(grad.dim()), Array2::zeros(grad.dim())));
            m.zip_mut_with(&grad, |mv, gv| {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv
            });
            v.zip_mut_with(&grad, |vv, gv| {
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv
            });
            for ((p, mv), vv) in param.iter_mut().zip(m.iter()).zip(v.iter()) {
                let mhat = mv / bc1;
                let vhat = vv / bc2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
