//! First-order optimizers over a [`ParameterStore`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{Gradients, ParamArray, ParameterStore};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// SGD momentum.
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Multiply the learning rate by `decay_factor` every `decay_every` updates; 0 disables.
    pub decay_every: u64,
    pub decay_factor: f64,
    /// Rescale the global gradient norm down to this value.
    pub grad_clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr: 0.01,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            decay_every: 0,
            decay_factor: 0.1,
            grad_clip: None,
        }
    }
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr,
            ..Default::default()
        }
    }

    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig {
            lr,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr >= 0.0
            && (0.0..1.0).contains(&self.momentum)
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.decay_factor > 0.0
            && self.grad_clip.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }

    /// Learning rate in effect for update number `t` (0-based).
    pub fn lr_at(&self, t: u64) -> f64 {
        if self.decay_every == 0 {
            return self.lr;
        }
        self.lr * self.decay_factor.powi((t / self.decay_every) as i32)
    }
}

/// Optimizer with per-parameter moment buffers keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    /// Updates applied so far.
    pub t: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Optimizer {
            config,
            t: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        })
    }

    /// Apply one update to every trainable parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParameterStore, grads: &Gradients) -> Result<()> {
        let lr = self.config.lr_at(self.t);
        let scale = match self.config.grad_clip {
            Some(c) => {
                let n = grads.norm();
                if n > c {
                    c / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let t = self.t + 1;
        for (name, g) in &grads.params {
            if !params.is_trainable(name) {
                continue;
            }
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::InvalidArgument(format!("gradient for unknown parameter `{name}`")))?;
            if p.data.len() != g.len() {
                return Err(Error::Shape(format!("gradient of `{name}` has {} entries", g.len())));
            }
            let c = &self.config;
            match c.kind {
                OptimizerKind::Sgd => {
                    let v = self
                        .first
                        .entry(name.clone())
                        .or_insert_with(|| vec![0.0; g.len()]);
                    for ((w, &gi), vi) in p.data.iter_mut().zip(g).zip(v.iter_mut()) {
                        let gi = gi * scale + c.weight_decay * *w;
                        *vi = c.momentum * *vi + gi;
                        *w -= lr * *vi;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self
                        .first
                        .entry(name.clone())
                        .or_insert_with(|| vec![0.0; g.len()]);
                    let v = self
                        .second
                        .entry(name.clone())
                        .or_insert_with(|| vec![0.0; g.len()]);
                    let bc1 = 1.0 - c.beta1.powi(t as i32);
                    let bc2 = 1.0 - c.beta2.powi(t as i32);
                    for (((w, &gi), mi), vi) in p.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        let gi = gi * scale + c.weight_decay * *w;
                        *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                        *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                        *w -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
                    }
                }
            }
        }
        self.t = t;
        params.version += 1;
        Ok(())
    }

    /// Moment buffers as named arrays (`m.<param>`, `v.<param>`).
    pub fn state_arrays(&self) -> BTreeMap<String, ParamArray> {
        let mut out = BTreeMap::new();
        for (prefix, map) in [("m", &self.first), ("v", &self.second)] {
            for (k, v) in map {
                out.insert(
                    format!("{prefix}.{k}"),
                    ParamArray {
                        shape: vec![v.len()],
                        data: v.clone(),
                    },
                );
            }
        }
        out
    }

    pub fn restore(config: OptimizerConfig, t: u64, arrays: &BTreeMap<String, ParamArray>) -> Result<Self> {
        let mut opt = Optimizer::new(config)?;
        opt.t = t;
        for (k, a) in arrays {
            let (map, name) = if let Some(n) = k.strip_prefix("m.") {
                (&mut opt.first, n)
            } else if let Some(n) = k.strip_prefix("v.") {
                (&mut opt.second, n)
            } else {
                return Err(Error::Checkpoint(format!("unrecognized optimizer array `{k}`")));
            };
            map.insert(name.to_string(), a.data.clone());
        }
        Ok(opt)
    }
}
