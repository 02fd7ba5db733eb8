//! Stochastic gradient descent with momentum, optional Nesterov lookahead,
//! decoupled-from-nothing classic L2 weight decay (added to the gradient),
//! and a stepwise learning-rate schedule.
//!
//! Weight decay applies only to convolution and linear weight matrices, never
//! to biases or batchnorm scale/shift.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Gradients, ParamStore};

/// One stage of the learning-rate schedule: from `epoch` (0-based) onward the
/// base rate is multiplied by `multiplier`. Stages compound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleStep {
    pub epoch: usize,
    pub multiplier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Base learning rate.
    pub lr0: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_nesterov")]
    pub nesterov: bool,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub schedule: Vec<ScheduleStep>,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_nesterov() -> bool {
    true
}

fn default_weight_decay() -> f64 {
    5e-4
}

fn default_batch_size() -> usize {
    128
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        for s in &self.schedule {
            if !(s.multiplier > 0.0 && s.multiplier.is_finite()) {
                return Err(Error::Config(format!(
                    "schedule multiplier must be positive, got {}",
                    s.multiplier
                )));
            }
        }
        Ok(())
    }

    /// Learning rate in force during `epoch` (0-based): the base rate times
    /// every multiplier whose entry epoch has been reached.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let mut lr = self.lr0;
        for s in &self.schedule {
            if s.epoch <= epoch {
                lr *= s.multiplier;
            }
        }
        lr
    }
}

/// Per-parameter momentum buffers, zero-initialized.
pub type Velocity = Gradients;

/// One SGD update:
///
/// ```text
/// g' = g + weight_decay * theta        (decaying tensors only)
/// v  = momentum * v + g'
/// theta -= lr * (g' + momentum * v)    (Nesterov)
/// theta -= lr * v                      (plain momentum)
/// ```
pub fn sgd_step(
    store: &mut ParamStore,
    grads: &Gradients,
    velocity: &mut Velocity,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    let gs = grads.params();
    let mut vs = velocity.params_mut();
    let mut ps = store.params_mut();
    if gs.len() != ps.len() || vs.len() != ps.len() {
        return Err(Error::Numeric(
            "gradient/velocity buffers do not match the parameter store".into(),
        ));
    }
    for ((p, g), v) in ps.iter_mut().zip(&gs).zip(vs.iter_mut()) {
        if p.layer != g.layer || p.name != g.name || p.tensor.len() != g.tensor.len() {
            return Err(Error::Numeric(format!(
                "gradient for layer {} {} does not match parameter layout",
                g.layer, g.name
            )));
        }
        let decay = if p.decay { cfg.weight_decay } else { 0.0 };
        let pd = p.tensor.data_mut();
        let gd = g.tensor.data();
        let vd = v.tensor.data_mut();
        for i in 0..pd.len() {
            let g_eff = gd[i] + decay * pd[i];
            vd[i] = cfg.momentum * vd[i] + g_eff;
            let step = if cfg.nesterov {
                g_eff + cfg.momentum * vd[i]
            } else {
                vd[i]
            };
            pd[i] -= lr * step;
        }
    }
    Ok(())
}
