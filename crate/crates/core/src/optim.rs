//! SGD with momentum, LARS, and the learning-rate and EMA schedules.

use serde::{Deserialize, Serialize};

use crate::encoder::Param;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Lars,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    /// Learning rate at batch 256; the peak is `base_lr * batch / 256`.
    pub base_lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub warmup_fraction: f64,
    pub trust_coefficient: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::SgdMomentum,
            base_lr: 0.3,
            weight_decay: 1e-6,
            momentum: 0.9,
            warmup_fraction: 0.01,
            trust_coefficient: 1e-3,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.base_lr > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.momentum)
            && (0.0..=1.0).contains(&self.warmup_fraction)
            && self.trust_coefficient > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Linear warmup followed by cosine decay to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(cfg: &OptimConfig, batch: usize, total_steps: u64) -> Result<Self> {
        cfg.validate()?;
        if batch == 0 || total_steps == 0 {
            return Err(Error::Config("learning-rate schedule needs a positive batch and step count".into()));
        }
        let warmup = ((cfg.warmup_fraction * total_steps as f64).ceil() as u64).min(total_steps);
        Ok(Self {
            peak: cfg.base_lr * batch as f64 / 256.0,
            warmup_steps: warmup,
            total_steps,
        })
    }
}

pub fn lr_at(s: &LrSchedule, step: u64) -> Result<f64> {
    if step > s.total_steps {
        return Err(Error::OutOfRange(format!("step {step} beyond {}", s.total_steps)));
    }
    if step < s.warmup_steps {
        return Ok(s.peak * step as f64 / s.warmup_steps as f64);
    }
    let span = s.total_steps - s.warmup_steps;
    if span == 0 {
        return Ok(s.peak);
    }
    let progress = (step - s.warmup_steps) as f64 / span as f64;
    Ok(0.5 * s.peak * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TauConfig {
    pub tau0: f64,
    pub tau_final: f64,
}

impl Default for TauConfig {
    fn default() -> Self {
        Self { tau0: 0.99, tau_final: 1.0 }
    }
}

/// EMA coefficient at `epoch` of `total`: cosine rise from `tau0` to `tau_final`.
pub fn tau_at(cfg: &TauConfig, epoch: usize, total: usize) -> Result<f64> {
    if !(0.0 <= cfg.tau0 && cfg.tau0 <= cfg.tau_final && cfg.tau_final <= 1.0) {
        return Err(Error::Config(format!("need 0 <= tau0 <= tau_final <= 1, got {cfg:?}")));
    }
    if total == 0 || epoch > total {
        return Err(Error::OutOfRange(format!("epoch {epoch} of {total}")));
    }
    let c = ((std::f64::consts::PI * epoch as f64 / total as f64).cos() + 1.0) / 2.0;
    Ok(cfg.tau_final - (cfg.tau_final - cfg.tau0) * c)
}

/// Momentum buffers mirroring the parameter list, plus a step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub momentum: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &[&Param<T>]) -> Self {
        Self {
            momentum: params.iter().map(|p| vec![T::zero(); p.value.len()]).collect(),
            step: 0,
        }
    }
}

fn norm<T: Scalar>(v: impl Iterator<Item = T>) -> f64 {
    v.map(|x| x.f64() * x.f64()).sum::<f64>().sqrt()
}

/// One update. SGD: `v = m v + g + λ w`, `w -= lr v`. LARS additionally scales the
/// decayed gradient of each weight tensor by `η ‖w‖ / ‖g + λ w‖`; biases and
/// normalization parameters get neither decay nor scaling.
pub fn step<T: Scalar>(params: &mut [&mut Param<T>], grads: &[Vec<T>], state: &mut OptimizerState<T>, lr: f64, cfg: &OptimConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.momentum.len() {
        return Err(Error::Shape(format!("{} params, {} grads, {} buffers", params.len(), grads.len(), state.momentum.len())));
    }
    for ((p, g), v) in params.iter().zip(grads).zip(&state.momentum) {
        if p.value.len() != g.len() || g.len() != v.len() {
            return Err(Error::Shape(format!("gradient for {} has the wrong length", p.name)));
        }
        if let Some(bad) = g.iter().find(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {} contains {bad}", p.name)));
        }
    }
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::OutOfRange(format!("learning rate {lr}")));
    }
    let m = T::cast(cfg.momentum);
    let lr_t = T::cast(lr);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.momentum.iter_mut()) {
        let exempt = cfg.kind == OptimizerKind::Lars && p.kind.is_excluded_from_adaptation();
        let decay = if exempt || p.kind.is_excluded_from_adaptation() { T::zero() } else { T::cast(cfg.weight_decay) };
        let decayed: Vec<T> = g.iter().zip(&p.value).map(|(&gi, &wi)| gi + decay * wi).collect();
        let trust = if cfg.kind == OptimizerKind::Lars && !exempt {
            let (wn, gn) = (norm(p.value.iter().copied()), norm(decayed.iter().copied()));
            if wn > 0.0 && gn > 0.0 {
                T::cast(cfg.trust_coefficient * wn / gn)
            } else {
                T::one()
            }
        } else {
            T::one()
        };
        for ((vi, di), wi) in v.iter_mut().zip(&decayed).zip(p.value.iter_mut()) {
            *vi = m * *vi + trust * *di;
            *wi -= lr_t * *vi;
        }
    }
    state.step += 1;
    Ok(())
}
