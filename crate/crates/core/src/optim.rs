//! Adam with inspectable, serializable moment buffers.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

/// Parameters whose gradient is absent are skipped entirely: neither the
/// value nor the moments change.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, state: BTreeMap::new() }
    }

    pub fn apply(&mut self, vars: &[(String, Var)], grads: &GradStore) -> Result<()> {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, var) in vars {
            // Gradients carry the op history of the backward pass; keeping it in
            // the moments would chain every step's graph together.
            let Some(g) = grads.get(var.as_tensor()).map(Tensor::detach) else { continue };
            let g = &g;
            let mom = match self.state.remove(name) {
                Some(m) => m,
                None => Moments { m: g.zeros_like()?, v: g.zeros_like()? },
            };
            let m = ((&mom.m * beta1)? + (g * (1.0 - beta1))?)?;
            let v = ((&mom.v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + eps)?)?;
            var.set(&(var.as_tensor() - (update * lr)?)?)?;
            self.state.insert(name.clone(), Moments { m: m.detach(), v: v.detach() });
        }
        Ok(())
    }

    /// Replace a moment buffer pair, checking it matches the parameter.
    pub fn restore(&mut self, name: &str, var: &Var, m: Tensor, v: Tensor) -> Result<()> {
        if m.dims() != var.dims() || v.dims() != var.dims() {
            return Err(Error::Corrupt(format!("optimizer state for {name} has the wrong shape")));
        }
        self.state.insert(name.to_string(), Moments { m, v });
        Ok(())
    }
}
