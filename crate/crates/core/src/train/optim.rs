//! Gradient accumulation and stochastic gradient descent with momentum.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Gradients, ParamStore};

fn default_momentum() -> f64 {
    0.9
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        #[serde(default = "default_momentum")]
        momentum: f64,
        #[serde(default)]
        weight_decay: f64,
        /// Rescales the summed gradient to at most this global L2 norm.
        #[serde(default)]
        clip_norm: Option<f64>,
    },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Sgd {
            momentum: default_momentum(),
            weight_decay: 0.0,
            clip_norm: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let OptimizerConfig::Sgd {
            momentum,
            weight_decay,
            clip_norm,
        } = self;
        let mut keys = Vec::new();
        if !(0.0..1.0).contains(momentum) {
            keys.push("optimizer.momentum".to_string());
        }
        if !(weight_decay.is_finite() && *weight_decay >= 0.0) {
            keys.push("optimizer.weight_decay".to_string());
        }
        if clip_norm.is_some_and(|c| !(c.is_finite() && c > 0.0)) {
            keys.push("optimizer.clip_norm".to_string());
        }
        if keys.is_empty() {
            Ok(())
        } else {
            Err(Error::Config {
                msg: "optimizer needs momentum in [0, 1), weight_decay >= 0, clip_norm > 0".into(),
                keys,
            })
        }
    }
}

/// Parameter gradients summed over frames in a fixed order.
#[derive(Clone, Debug, Default)]
pub struct GradAccumulator {
    sums: BTreeMap<String, Vec<f64>>,
    frames: usize,
}

impl GradAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, grads: &Gradients) -> Result<()> {
        for (name, g) in grads.params() {
            match self.sums.get_mut(name) {
                Some(s) if s.len() == g.len() => {
                    for (a, b) in s.iter_mut().zip(g) {
                        *a += b;
                    }
                }
                Some(s) => {
                    return Err(Error::Structural(format!(
                        "gradient {name} of length {} after {}",
                        g.len(),
                        s.len()
                    )))
                }
                None => {
                    self.sums.insert(name.to_string(), g.to_vec());
                }
            }
        }
        self.frames += 1;
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Mean gradient per parameter.
    pub fn mean(&self) -> BTreeMap<String, Vec<f64>> {
        let k = self.frames.max(1) as f64;
        self.sums
            .iter()
            .map(|(n, s)| (n.clone(), s.iter().map(|v| v / k).collect()))
            .collect()
    }
}

/// Momentum SGD: `v = mu * v + g + wd * w`, `w -= lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    clip_norm: Option<f64>,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(cfg: &OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        let OptimizerConfig::Sgd {
            momentum,
            weight_decay,
            clip_norm,
        } = *cfg;
        Ok(Sgd {
            momentum,
            weight_decay,
            clip_norm,
            velocity: BTreeMap::new(),
        })
    }

    /// Applies one update; returns the gradient norm before clipping.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
    ) -> Result<f64> {
        let norm = grads
            .values()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        for (name, g) in grads {
            let w = params
                .get_mut(name)
                .ok_or_else(|| Error::Structural(format!("gradient for unknown parameter {name}")))?;
            if w.len() != g.len() {
                return Err(Error::Structural(format!(
                    "gradient {name} has {} entries for {} weights",
                    g.len(),
                    w.len()
                )));
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for ((w, v), g) in w.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *v = self.momentum * *v + scale * g + self.weight_decay * *w;
                *w -= lr * *v;
            }
        }
        Ok(norm)
    }
}
