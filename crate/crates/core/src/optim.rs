//! Elementwise optimizers over [`PolicyParams`].
//!
//! Entries whose gradient is exactly zero are left untouched by both SGD and
//! Adam (Adam's moment slots for those entries are not updated either), so a
//! masked head stays bit-identical across steps.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::policy::{GradBuffer, PolicyParams};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Sgd { lr: DEFAULT_LR }
    }
}

pub const DEFAULT_LR: f64 = 0.05;

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            OptimizerConfig::Sgd { lr } | OptimizerConfig::Adam { lr, .. } => *lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.lr();
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(LabError::Config(format!("learning rate {lr} must be finite and >= 0")));
        }
        if let OptimizerConfig::Adam { beta1, beta2, eps, .. } = self {
            if !(0.0..1.0).contains(beta1) || !(0.0..1.0).contains(beta2) || !(*eps > 0.0) {
                return Err(LabError::Config("adam betas must be in [0, 1) and eps > 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer with its running state.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    step: u64,
    thinking: Moments,
    answer: Moments,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            step: 0,
            thinking: Moments::default(),
            answer: Moments::default(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Adam first/second moments of the answer head (empty for SGD or before the first step).
    pub fn answer_moments(&self) -> (&[f64], &[f64]) {
        (&self.answer.m, &self.answer.v)
    }

    pub fn step(&mut self, params: &mut PolicyParams, grad: &GradBuffer) -> Result<()> {
        if params.shape != grad.shape
            || params.thinking.len() != grad.thinking.len()
            || params.answer.len() != grad.answer.len()
        {
            return Err(LabError::Shape("gradient shape does not match parameters".into()));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(LabError::NonFinite("gradient".into()));
        }
        self.step += 1;
        match self.config {
            OptimizerConfig::Sgd { lr } => {
                sgd(&mut params.thinking, &grad.thinking, lr);
                sgd(&mut params.answer, &grad.answer, lr);
            }
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let h = AdamStep {
                    lr,
                    beta1,
                    beta2,
                    eps,
                    c1,
                    c2,
                };
                h.apply(&mut params.thinking, &grad.thinking, &mut self.thinking);
                h.apply(&mut params.answer, &grad.answer, &mut self.answer);
            }
        }
        Ok(())
    }
}

fn sgd(theta: &mut [f64], grad: &[f64], lr: f64) {
    for (z, g) in theta.iter_mut().zip(grad) {
        if *g != 0.0 {
            *z -= lr * g;
        }
    }
}

struct AdamStep {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    c1: f64,
    c2: f64,
}

impl AdamStep {
    fn apply(&self, theta: &mut [f64], grad: &[f64], mom: &mut Moments) {
        if mom.m.len() != theta.len() {
            mom.m = vec![0.0; theta.len()];
            mom.v = vec![0.0; theta.len()];
        }
        for i in 0..theta.len() {
            let g = grad[i];
            if g == 0.0 {
                continue;
            }
            mom.m[i] = self.beta1 * mom.m[i] + (1.0 - self.beta1) * g;
            mom.v[i] = self.beta2 * mom.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = mom.m[i] / self.c1;
            let vhat = mom.v[i] / self.c2;
            theta[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// One SGD/Adam step with a fresh optimizer; convenience for stateless SGD.
pub fn optimizer_step(params: &PolicyParams, grad: &GradBuffer, config: &OptimizerConfig) -> Result<PolicyParams> {
    let mut out = params.clone();
    Optimizer::new(*config).step(&mut out, grad)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyShape;

    fn shape() -> PolicyShape {
        PolicyShape {
            instruction_count: 1,
            thinking_len: 1,
            answer_len: 1,
            bucket_count: 1,
            vocab_size: 2,
        }
    }

    fn params() -> PolicyParams {
        PolicyParams {
            shape: shape(),
            thinking: vec![0.3, -1.2],
            answer: vec![2.0, 0.125],
        }
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut g = GradBuffer::zeros(shape());
        g.thinking = vec![1.0, -3.0];
        let out = optimizer_step(&params(), &g, &OptimizerConfig::Sgd { lr: 0.0 }).unwrap();
        assert_eq!(out, params());
    }

    #[test]
    fn zero_grad_is_bit_identical() {
        let g = GradBuffer::zeros(shape());
        for cfg in [OptimizerConfig::Sgd { lr: 0.7 }, OptimizerConfig::adam(0.1)] {
            let out = optimizer_step(&params(), &g, &cfg).unwrap();
            for (a, b) in out
                .thinking
                .iter()
                .chain(&out.answer)
                .zip(params().thinking.iter().chain(&params().answer))
            {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn sgd_arithmetic() {
        let mut g = GradBuffer::zeros(shape());
        g.answer[0] = 2.0;
        let out = optimizer_step(&params(), &g, &OptimizerConfig::Sgd { lr: 0.5 }).unwrap();
        assert_eq!(out.answer[0], 1.0);
        assert_eq!(out.answer[1], 0.125);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut g = GradBuffer::zeros(shape());
        g.thinking[0] = 0.37;
        let out = optimizer_step(&params(), &g, &OptimizerConfig::adam(0.01)).unwrap();
        assert!((out.thinking[0] - (0.3 - 0.01)).abs() < 1e-9);
    }

    #[test]
    fn adam_leaves_zero_grad_moments_untouched() {
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.01));
        let mut p = params();
        let mut g = GradBuffer::zeros(shape());
        g.thinking = vec![0.5, -0.5];
        for _ in 0..3 {
            opt.step(&mut p, &g).unwrap();
        }
        let (m, v) = opt.answer_moments();
        assert!(m.iter().chain(v).all(|z| *z == 0.0));
        assert_eq!(p.answer, params().answer);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut g = GradBuffer::zeros(shape());
        g.answer[1] = f64::INFINITY;
        assert!(matches!(
            optimizer_step(&params(), &g, &OptimizerConfig::default()),
            Err(LabError::NonFinite(_))
        ));
    }
}
