use serde::{Deserialize, Serialize};

use super::model::Model;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Optimizer choice and learning rate, as it appears in run configs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr,
        }
    }

    pub fn build(self) -> Optimizer {
        match self.kind {
            OptimizerKind::Sgd => Optimizer::sgd(self.lr),
            OptimizerKind::Adam => Optimizer::adam(self.lr),
        }
    }
}

/// Plain SGD or bias-corrected Adam over a model's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Optimizer {
            kind: OptimizerKind::Sgd,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn adam(lr: f64) -> Self {
        Optimizer {
            kind: OptimizerKind::Adam,
            ..Optimizer::sgd(lr)
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Clears Adam moments and the step counter (used when the model is re-initialized).
    pub fn reset(&mut self) {
        self.step = 0;
        self.first_moment.clear();
        self.second_moment.clear();
    }

    pub fn step(&mut self, model: &mut Model) {
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for p in model.params_mut() {
                    for (v, g) in p.value.iter_mut().zip(&p.grad) {
                        *v -= self.lr * g;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.first_moment.is_empty() {
                    self.first_moment = model.params().map(|p| vec![0.0; p.len()]).collect();
                    self.second_moment = self.first_moment.clone();
                }
                let t = self.step as i32;
                let c1 = 1.0 - self.beta1.powi(t);
                let c2 = 1.0 - self.beta2.powi(t);
                let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
                for ((p, m), v) in model
                    .params_mut()
                    .zip(&mut self.first_moment)
                    .zip(&mut self.second_moment)
                {
                    for (((x, g), mi), vi) in p.value.iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = b1 * *mi + (1.0 - b1) * g;
                        *vi = b2 * *vi + (1.0 - b2) * g * g;
                        let m_hat = *mi / c1;
                        let v_hat = *vi / c2;
                        *x -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
    }
}
