//! Parameter updates and the learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::params::ParamSet;

/// A temporary learning-rate boost.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Restart {
    pub start_epoch: usize,
    pub multiplier: f64,
    pub duration: usize,
}

impl Restart {
    pub fn at(start_epoch: usize) -> Self {
        Self {
            start_epoch,
            multiplier: 5.0,
            duration: 3,
        }
    }

    fn active(&self, epoch: usize) -> bool {
        (self.start_epoch..self.start_epoch + self.duration).contains(&epoch)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn sgd() -> Self {
        OptimizerKind::Sgd { momentum: 0.9 }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// When the focusing exponent of the mask loss is raised.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GammaSwitch {
    /// Once the relative epoch-to-epoch improvement of the training loss
    /// stays below `threshold` for `window` consecutive epochs.
    Plateau { threshold: f64, window: usize },
    /// At the start of this epoch.
    Epoch { epoch: usize },
    Never,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub restarts: Vec<Restart>,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub gamma_switch: GammaSwitch,
    pub gamma_initial: f64,
    pub gamma_final: f64,
    pub lambda: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Record the loss at initialization as epoch 0 and let it compete for
    /// the best checkpoint.
    pub evaluate_initial: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-5,
            epochs: 30,
            restarts: vec![Restart::at(10), Restart::at(20)],
            decay_factor: 0.5,
            decay_every: 7,
            gamma_switch: GammaSwitch::Plateau {
                threshold: 0.01,
                window: 3,
            },
            gamma_initial: 0.0,
            gamma_final: 2.0,
            lambda: 200.0,
            seed: 0,
            optimizer: OptimizerKind::sgd(),
            evaluate_initial: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return invalid("learning rate must be finite and non-negative");
        }
        if self.decay_every == 0 {
            return invalid("decay_every must be positive");
        }
        if self.gamma_initial < 0.0 || self.gamma_final < 0.0 {
            return invalid("focusing exponents must be non-negative");
        }
        Ok(())
    }
}

/// Learning rate for `epoch` (0-based). `gamma_switched_at` is the epoch the
/// focal exponent was raised, if it has been.
pub fn schedule_lr(config: &TrainConfig, epoch: usize, gamma_switched_at: Option<usize>) -> f64 {
    let mut lr = config.lr;
    for r in &config.restarts {
        if r.active(epoch) {
            lr *= r.multiplier;
        }
    }
    if let Some(s) = gamma_switched_at {
        if epoch >= s {
            lr *= config.decay_factor.powi(((epoch - s) / config.decay_every) as i32);
        }
    }
    lr
}

/// Plain gradient step `w <- w - lr * g`.
pub fn sgd_step(params: &mut ParamSet, grads: &BTreeMap<String, Vec<f64>>, lr: f64) -> Result<()> {
    for (name, g) in grads {
        let w = param_mut(params, name, g.len())?;
        for (wi, gi) in w.iter_mut().zip(g) {
            *wi -= lr * gi;
        }
    }
    Ok(())
}

fn param_mut<'a>(params: &'a mut ParamSet, name: &str, len: usize) -> Result<&'a mut [f64]> {
    match params.get_mut(name) {
        Some(t) if t.numel() == len => Ok(t.data_mut()),
        Some(t) => invalid(format!(
            "gradient for `{name}` has {len} entries, parameter has {}",
            t.numel()
        )),
        None => invalid(format!("gradient for unknown parameter `{name}`")),
    }
}

/// Stateful optimizer over named parameters.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
    steps: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Vec<f64>>, lr: f64) -> Result<()> {
        self.steps += 1;
        for (name, g) in grads {
            let w = param_mut(params, name, g.len())?;
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    for ((wi, mi), gi) in w.iter_mut().zip(m.iter_mut()).zip(g) {
                        *mi = momentum * *mi + gi;
                        *wi -= lr * *mi;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let v = self
                        .second
                        .entry(name.clone())
                        .or_insert_with(|| vec![0.0; g.len()]);
                    let c1 = 1.0 - beta1.powi(self.steps);
                    let c2 = 1.0 - beta2.powi(self.steps);
                    for (((wi, mi), vi), gi) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        *wi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
