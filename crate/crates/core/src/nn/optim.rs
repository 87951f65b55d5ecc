use serde::{Deserialize, Serialize};

use super::{Gradients, Network, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one network.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(net: &Network) -> Self {
        Self::with_config(net, AdamConfig::default())
    }

    pub fn with_config(net: &Network, config: AdamConfig) -> Self {
        let zeros = || net.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Adam {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected Adam update. All gradients are checked for
    /// finiteness before any parameter changes.
    pub fn step(&mut self, net: &mut Network, grads: &Gradients, lr: f64) -> Result<()> {
        if grads.0.len() != net.params().len()
            || grads.0.iter().zip(net.params()).any(|(g, p)| g.shape() != p.shape())
        {
            return Err(Error::arg("gradient shapes do not match parameters"));
        }
        if let Some(i) = grads.0.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("gradient of {}", net.param_name(i))));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in net
            .params_mut()
            .iter_mut()
            .zip(&grads.0)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
