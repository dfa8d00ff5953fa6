//! Adam, NAdam and RMSprop with per-parameter moment buffers.

use std::fmt;
use std::str::FromStr;

use super::mlp::Parameterized;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    NAdam,
    RmsProp,
}

impl OptimizerKind {
    pub fn tag(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::NAdam => "nadam",
            OptimizerKind::RmsProp => "rmsprop",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "nadam" => Ok(OptimizerKind::NAdam),
            "rmsprop" => Ok(OptimizerKind::RmsProp),
            other => Err(Error::InvalidArgument(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// RMSprop decay of the squared-gradient average.
    pub rho: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            rho: 0.9,
            eps: 1e-8,
        }
    }
}

/// Optimizer moments for one parameter set.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    config: OptimizerConfig,
    step_count: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    /// Moment buffers shaped after `params`.
    pub fn for_params(config: OptimizerConfig, params: &impl Parameterized) -> Result<Self> {
        Self::with_lens(config, &params.param_lens())
    }

    pub fn with_lens(config: OptimizerConfig, lens: &[usize]) -> Result<Self> {
        check_learning_rate(config.learning_rate)?;
        let zeros = || lens.iter().map(|&n| vec![0.0; n]).collect::<Vec<_>>();
        let first = if config.kind == OptimizerKind::RmsProp {
            Vec::new()
        } else {
            zeros()
        };
        Ok(Self {
            config,
            step_count: 0,
            first,
            second: zeros(),
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.config.kind
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn learning_rate(&self) -> f64 {
        self.config.learning_rate
    }

    pub fn set_learning_rate(&mut self, lr: f64) -> Result<()> {
        check_learning_rate(lr)?;
        self.config.learning_rate = lr;
        Ok(())
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Convenience wrapper applying [`OptimizerState::step`] to a
    /// [`Parameterized`] value.
    pub fn apply(&mut self, target: &mut impl Parameterized, grads: &[&[f64]]) -> Result<()> {
        let mut params = target.param_slices_mut();
        self.step(&mut params, grads)
    }

    /// One update. Rejects mismatched shapes and non-finite gradients before
    /// touching any parameter or moment.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.second.len() || grads.len() != self.second.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.second.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, ((p, g), v)) in params.iter().zip(grads).zip(&self.second).enumerate() {
            if p.len() != v.len() || g.len() != v.len() {
                return Err(Error::Shape(format!("parameter tensor {i} size changed")));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of parameter tensor {i}")));
            }
        }

        self.step_count += 1;
        let c = self.config;
        let t = self.step_count as i32;
        match c.kind {
            OptimizerKind::Adam | OptimizerKind::NAdam => {
                let bc1 = 1.0 - c.beta1.powi(t);
                let bc2 = 1.0 - c.beta2.powi(t);
                let nesterov = c.kind == OptimizerKind::NAdam;
                for ((p, g), (m, v)) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.first.iter_mut().zip(self.second.iter_mut()))
                {
                    for j in 0..p.len() {
                        let gj = g[j];
                        m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                        v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                        let m_hat = m[j] / bc1;
                        let v_hat = v[j] / bc2;
                        let direction = if nesterov {
                            c.beta1 * m_hat + (1.0 - c.beta1) * gj / bc1
                        } else {
                            m_hat
                        };
                        p[j] -= c.learning_rate * direction / (v_hat.sqrt() + c.eps);
                    }
                }
            }
            OptimizerKind::RmsProp => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(self.second.iter_mut()) {
                    for j in 0..p.len() {
                        let gj = g[j];
                        v[j] = c.rho * v[j] + (1.0 - c.rho) * gj * gj;
                        p[j] -= c.learning_rate * gj / (v[j].sqrt() + c.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

fn check_learning_rate(lr: f64) -> Result<()> {
    if lr > 0.0 && lr.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "learning rate must be positive, got {lr}"
        )))
    }
}
