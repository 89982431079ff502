//! First-order update rules: momentum descent for model weights and
//! adaptive-moment descent for architecture parameters.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UpdateRule {
    /// Heavy-ball momentum with L2 weight decay folded into the gradient.
    Momentum { momentum: f64, weight_decay: f64 },
    /// Bias-corrected adaptive moments.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl UpdateRule {
    pub fn plain() -> Self {
        UpdateRule::Momentum {
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }

    fn slots(&self) -> usize {
        match self {
            UpdateRule::Momentum { .. } => 1,
            UpdateRule::Adam { .. } => 2,
        }
    }
}

/// Per-parameter auxiliary buffers, step counter and learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub step: u64,
    /// One entry per parameter; `slots` buffers each congruent with it.
    pub buffers: BTreeMap<ParamId, Vec<Vec<f64>>>,
    /// Updates applied to each parameter. Bias correction uses these, so a
    /// group joining mid-run starts its own moment estimates from scratch.
    pub param_steps: BTreeMap<ParamId, u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub rule: UpdateRule,
    pub state: OptimizerState,
}

impl Optimizer {
    pub fn new(rule: UpdateRule, lr: f64) -> Self {
        Self {
            rule,
            state: OptimizerState {
                lr,
                step: 0,
                buffers: BTreeMap::new(),
                param_steps: BTreeMap::new(),
            },
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.state.lr = lr;
    }

    /// Applies one update to every tensor in `ids` using its gradient slot.
    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId]) -> Result<()> {
        for &id in ids {
            if store.get(id).grad().is_none() {
                return Err(Error::InvalidArgument(format!(
                    "parameter {} has no gradient",
                    store.name(id)
                )));
            }
        }
        self.state.step += 1;
        let lr = self.state.lr;
        for &id in ids {
            let t = self.state.param_steps.entry(id).or_insert(0);
            *t += 1;
            let t = *t as i32;
            let slots = self.rule.slots();
            let tensor = store.get_mut(id);
            let n = tensor.len();
            let bufs = self
                .state
                .buffers
                .entry(id)
                .or_insert_with(|| vec![vec![0.0; n]; slots]);
            let grad = tensor.grad().expect("checked above").to_vec();
            let data = tensor.data_mut();
            match self.rule {
                UpdateRule::Momentum {
                    momentum,
                    weight_decay,
                } => {
                    let buf = &mut bufs[0];
                    for i in 0..n {
                        let g = grad[i] + weight_decay * data[i];
                        buf[i] = momentum * buf[i] + g;
                        data[i] -= lr * buf[i];
                    }
                }
                UpdateRule::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let (m, v) = bufs.split_at_mut(1);
                    let (m, v) = (&mut m[0], &mut v[0]);
                    for i in 0..n {
                        let g = grad[i];
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                        let mhat = m[i] / c1;
                        let vhat = v[i] / c2;
                        data[i] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Cosine decay from `lr0` to `lr_min` over `total` epochs.
pub fn cosine_lr(lr0: f64, lr_min: f64, epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    let frac = (epoch.min(total) as f64) / total as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (PI * frac).cos())
}
