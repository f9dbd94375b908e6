//! SGD with classical or Nesterov momentum, L2 weight decay, and
//! learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{LayerGrads, Network};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepDecay {
    pub factor: f64,
    pub every_k_epochs: usize,
}

impl StepDecay {
    fn at(&self, epoch: usize) -> f64 {
        self.factor.powi((epoch / self.every_k_epochs) as i32)
    }

    fn validate(&self) -> Result<()> {
        if !(self.factor > 0.0 && self.factor <= 1.0) || self.every_k_epochs == 0 {
            return Err(Error::Config(format!(
                "step decay needs factor in (0, 1] and every_k_epochs >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    Constant,
    Step(StepDecay),
    /// Each phase trains at its own configured rate, optionally step-decayed
    /// within the phase.
    #[default]
    PerPhaseConstant,
    PerPhaseStep(StepDecay),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub nesterov: bool,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub schedule: Schedule,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec {
            lr: 0.01,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 1e-4,
            schedule: Schedule::PerPhaseConstant,
        }
    }
}

impl OptimizerSpec {
    pub fn plain(lr: f64) -> Self {
        OptimizerSpec {
            lr,
            momentum: 0.0,
            nesterov: false,
            weight_decay: 0.0,
            schedule: Schedule::Constant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        match &self.schedule {
            Schedule::Step(s) | Schedule::PerPhaseStep(s) => s.validate(),
            _ => Ok(()),
        }
    }
}

/// Learning rate for `epoch` (counted from the start of the phase for the
/// per-phase schedules). `phase_lr` is the phase's configured rate; the
/// per-phase schedules fall back to `spec.lr` without one, the others ignore
/// it.
pub fn effective_lr(spec: &OptimizerSpec, epoch: usize, phase_lr: Option<f64>) -> f64 {
    match &spec.schedule {
        Schedule::Constant => spec.lr,
        Schedule::Step(s) => spec.lr * s.at(epoch),
        Schedule::PerPhaseConstant => phase_lr.unwrap_or(spec.lr),
        Schedule::PerPhaseStep(s) => phase_lr.unwrap_or(spec.lr) * s.at(epoch),
    }
}

/// One parameter tensor's update. With `momentum == 0` this is exactly
/// `w - lr * (g + wd * w)`; otherwise `v <- mu v - lr g'`, then `w <- w + v`
/// or, with Nesterov, `w <- w + mu v - lr g'`.
pub fn sgd_update(
    weights: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    spec: &OptimizerSpec,
) {
    debug_assert_eq!(weights.len(), grads.len());
    debug_assert_eq!(weights.len(), velocity.len());
    let (mu, wd) = (spec.momentum, spec.weight_decay);
    for ((w, &g), v) in weights.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let g = if wd == 0.0 { g } else { g + wd * *w };
        if mu == 0.0 {
            *w -= lr * g;
        } else {
            *v = mu * *v - lr * g;
            if spec.nesterov {
                *w += mu * *v - lr * g;
            } else {
                *w += *v;
            }
        }
    }
}

/// Per-layer momentum buffers, in [`Network::dense`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocities: Vec<(Vec<f64>, Vec<f64>)>,
}

impl OptimizerState {
    pub fn new(net: &Network) -> Self {
        OptimizerState {
            velocities: net
                .dense()
                .map(|d| (vec![0.0; d.weight.len()], vec![0.0; d.bias.len()]))
                .collect(),
        }
    }

    pub fn reset(&mut self) {
        for (w, b) in &mut self.velocities {
            w.fill(0.0);
            b.fill(0.0);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.velocities
            .iter()
            .all(|(w, b)| w.iter().chain(b).all(|&v| v == 0.0))
    }
}

/// Applies one SGD step to every dense layer. Non-finite gradients abort
/// before any parameter changes, naming the offending layer.
pub fn sgd_step(
    net: &mut Network,
    grads: &[LayerGrads],
    state: &mut OptimizerState,
    spec: &OptimizerSpec,
    lr: f64,
) -> Result<()> {
    for (layer, g) in net.dense().zip(grads) {
        if g.weight.shape() != layer.weight.shape() || g.bias.shape() != layer.bias.shape() {
            return Err(Error::Dimension(format!(
                "gradient shapes for {} do not match parameters",
                layer.name
            )));
        }
        if !g.weight.all_finite() || !g.bias.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient in layer {}",
                layer.name
            )));
        }
    }
    if grads.len() != state.velocities.len() {
        return Err(Error::Contract(format!(
            "{} gradients for {} layers",
            grads.len(),
            state.velocities.len()
        )));
    }
    for ((layer, g), (vw, vb)) in net.dense_mut().zip(grads).zip(&mut state.velocities) {
        sgd_update(layer.weight.data_mut(), g.weight.data(), vw, lr, spec);
        sgd_update(layer.bias.data_mut(), g.bias.data(), vb, lr, spec);
    }
    Ok(())
}
