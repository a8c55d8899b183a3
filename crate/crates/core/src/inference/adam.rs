use std::collections::HashMap;

use crate::error::{PplError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Adam with bias correction. Moment buffers are created lazily per param
/// name, so params first touched late start from `t = 0`.
#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    moments: HashMap<String, Moments>,
}

impl AdamState {
    pub fn new(lr: f64) -> Result<Self> {
        Self::with_config(AdamConfig::new(lr))
    }

    pub fn with_config(config: AdamConfig) -> Result<Self> {
        if !(config.lr > 0.0 && config.lr.is_finite()) {
            return Err(PplError::InvalidArgument(format!("lr must be positive, got {}", config.lr)));
        }
        Ok(Self {
            config,
            moments: HashMap::new(),
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Steps taken so far for `name`.
    pub fn step_count(&self, name: &str) -> u64 {
        self.moments.get(name).map_or(0, |m| m.t)
    }

    /// Updates each leaf in place from its accumulated gradient. Leaves
    /// without a gradient are skipped.
    pub fn update<'a>(&mut self, params: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        for (name, leaf) in params {
            let grad = leaf.grad_ref();
            let Some(g) = grad.as_ref() else { continue };
            let st = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
                t: 0,
            });
            st.t += 1;
            let bc1 = 1.0 - beta1.powi(st.t as i32);
            let bc2 = 1.0 - beta2.powi(st.t as i32);
            let mut values = leaf.to_vec();
            for i in 0..g.len() {
                st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * g[i];
                st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = st.m[i] / bc1;
                let v_hat = st.v[i] / bc2;
                values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            drop(grad);
            leaf.set_data(&values)?;
        }
        Ok(())
    }
}
