use std::collections::HashMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Rescale each step's gradients so their joint L2 norm is at most this.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            clip_norm: None,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip norm must be > 0, got {c}")));
            }
        }
        Ok(())
    }
}

/// Stochastic gradient descent with heavy-ball momentum:
/// `v <- momentum * v + g; p <- p - lr * v`.
///
/// Only the variables handed to [`Sgd::step`] are touched; velocity buffers of
/// variables left out of a step are neither applied nor decayed.
#[derive(Debug)]
pub struct Sgd {
    cfg: SgdConfig,
    velocity: HashMap<String, Tensor>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            velocity: HashMap::new(),
        })
    }

    pub fn config(&self) -> SgdConfig {
        self.cfg
    }

    pub fn step(&mut self, params: &[(String, Var)], grads: &GradStore) -> Result<()> {
        let scale = match self.cfg.clip_norm {
            Some(max) => {
                let norm = grad_norm(params, grads)?;
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        for (name, var) in params {
            let Some(g) = grads.get(var) else { continue };
            let g = if scale < 1.0 { (g * scale)? } else { g.clone() };
            let g = &g;
            let v = match self.velocity.get(name) {
                Some(prev) if self.cfg.momentum > 0.0 => ((prev * self.cfg.momentum)? + g)?,
                _ => g.detach(),
            }
            .detach();
            var.set(&(var.as_tensor() - (&v * self.cfg.lr)?)?)?;
            self.velocity.insert(name.clone(), v);
        }
        Ok(())
    }
}

/// Joint L2 norm of the gradients of `params`.
pub fn grad_norm(params: &[(String, Var)], grads: &GradStore) -> Result<f64> {
    let mut sq = 0.0f64;
    for (_, var) in params {
        if let Some(g) = grads.get(var) {
            sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        }
    }
    Ok(sq.sqrt())
}
