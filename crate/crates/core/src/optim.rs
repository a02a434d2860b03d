//! Parameter update rules: SGD, ADAM, and a variance-ADAM variant that
//! estimates the second moment from a centered (sample-variance style)
//! exponential average instead of raw squared gradients.

use crate::{Error, Result};

/// Which update rule to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
    /// ADAM with the second moment replaced by a centered estimate:
    /// a running mean of the gradient is maintained and the variance
    /// accumulator tracks squared deviations from it.
    VarianceAdam,
}

impl OptimizerKind {
    pub fn id(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
            OptimizerKind::VarianceAdam => "vadam",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            "vadam" => Ok(OptimizerKind::VarianceAdam),
            _ => Err(Error::Config(format!("unknown optimizer {s:?}"))),
        }
    }
}

/// Hyperparameters; the betas and epsilon follow the usual ADAM defaults.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind) -> Self {
        OptimizerConfig { kind, lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }
}

/// Stateful optimizer over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    /// first-moment estimate
    m: Vec<f64>,
    /// second-moment (or centered variance) estimate
    v: Vec<f64>,
    /// running gradient mean, variance-ADAM only
    mu: Vec<f64>,
    t: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, param_count: usize) -> Self {
        let moments = match config.kind {
            OptimizerKind::Sgd => 0,
            _ => param_count,
        };
        let mu = match config.kind {
            OptimizerKind::VarianceAdam => param_count,
            _ => 0,
        };
        Optimizer {
            config,
            m: vec![0.0; moments],
            v: vec![0.0; moments],
            mu: vec![0.0; mu],
            t: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Apply one update in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} gradients", params.len()),
                got: format!("{}", grads.len()),
            });
        }
        if self.config.kind != OptimizerKind::Sgd && params.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} moment entries", self.m.len()),
                got: format!("{}", params.len()),
            });
        }
        let OptimizerConfig { lr, beta1, beta2, eps, .. } = self.config;
        match self.config.kind {
            OptimizerKind::Sgd => {
                for (p, &g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                for ((p, &g), (m, v)) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
            OptimizerKind::VarianceAdam => {
                self.t += 1;
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                for (((p, &g), (m, v)), mu) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                    .zip(self.mu.iter_mut())
                {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *mu = beta2 * *mu + (1.0 - beta2) * g;
                    let centered = g - *mu;
                    *v = beta2 * *v + (1.0 - beta2) * centered * centered;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

/// Plain gradient step, exposed for callers that do not want state.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} gradients", params.len()),
            got: format!("{}", grads.len()),
        });
    }
    for (p, &g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
    Ok(())
}
