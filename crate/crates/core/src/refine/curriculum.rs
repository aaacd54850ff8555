//! Number-of-clusters schedule over epochs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Quarter-period cosine from `k0` at `t_alpha` to `k_final` at the last epoch.
    Cosine,
    /// `k_final + cos(2 (t - t_alpha) / ((T - t_alpha) pi)) (k0 - k_final)`, transcribed
    /// as written; it does not reach `k_final` at `T`.
    CosineLiteral,
    Linear,
    Piecewise,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rounding {
    Nearest,
    Floor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumConfig {
    pub k0: usize,
    pub k_final: usize,
    /// Epoch at which the decay starts; `None` means `ceil(2 T / 15)` (40 of 300).
    pub t_alpha: Option<usize>,
    pub epochs: usize,
    pub kind: ScheduleKind,
    /// `(epoch, k)` drops for the piecewise kind; empty means four equal steps.
    pub milestones: Vec<(usize, usize)>,
    pub rounding: Rounding,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            k0: 128,
            k_final: 4,
            t_alpha: None,
            epochs: 300,
            kind: ScheduleKind::Cosine,
            milestones: Vec::new(),
            rounding: Rounding::Nearest,
        }
    }
}

impl CurriculumConfig {
    pub fn fixed(k: usize, epochs: usize) -> Self {
        Self {
            k0: k,
            k_final: k,
            epochs,
            kind: ScheduleKind::Fixed,
            ..Self::default()
        }
    }

    pub fn t_alpha(&self) -> usize {
        self.t_alpha.unwrap_or((2 * self.epochs).div_ceil(15))
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("curriculum needs at least one epoch".into()));
        }
        if self.kind == ScheduleKind::Fixed {
            if self.k0 == 0 {
                return Err(Error::Config("fixed K must be positive".into()));
            }
            return Ok(());
        }
        if self.k0 < 2 || self.k_final < 2 {
            return Err(Error::Config(format!("scheduled K needs k0, k_final >= 2 (got {} and {})", self.k0, self.k_final)));
        }
        if self.t_alpha() >= self.epochs {
            return Err(Error::Config(format!("t_alpha {} must precede the final epoch {}", self.t_alpha(), self.epochs)));
        }
        if self.milestones.windows(2).any(|w| w[0].0 >= w[1].0) || self.milestones.iter().any(|m| m.1 == 0) {
            return Err(Error::Config("piecewise milestones must have increasing epochs and positive K".into()));
        }
        Ok(())
    }

    fn default_milestones(&self) -> Vec<(usize, usize)> {
        let (ta, t) = (self.t_alpha() as f64, self.epochs as f64);
        (1..=4)
            .map(|i| {
                let at = (ta + (t - ta) * i as f64 / 4.0).round() as usize;
                let k = self.k0 as f64 + (self.k_final as f64 - self.k0 as f64) * i as f64 / 4.0;
                (at, k.round() as usize)
            })
            .collect()
    }
}

/// Cluster count for epoch `t` in `0..=epochs`.
pub fn k_at(cfg: &CurriculumConfig, t: usize) -> Result<usize> {
    cfg.validate()?;
    if t > cfg.epochs {
        return Err(Error::OutOfRange(format!("epoch {t} beyond schedule length {}", cfg.epochs)));
    }
    if cfg.kind == ScheduleKind::Fixed {
        return Ok(cfg.k0);
    }
    let ta = cfg.t_alpha();
    if t < ta {
        return Ok(cfg.k0);
    }
    let (k0, kf) = (cfg.k0 as f64, cfg.k_final as f64);
    let progress = (t - ta) as f64 / (cfg.epochs - ta) as f64;
    let raw = match cfg.kind {
        ScheduleKind::Cosine => kf + (std::f64::consts::FRAC_PI_2 * progress).cos() * (k0 - kf),
        ScheduleKind::CosineLiteral => kf + (2.0 * (t - ta) as f64 / ((cfg.epochs - ta) as f64 * std::f64::consts::PI)).cos() * (k0 - kf),
        ScheduleKind::Linear => k0 + (kf - k0) * progress,
        ScheduleKind::Piecewise => {
            let ms = if cfg.milestones.is_empty() { cfg.default_milestones() } else { cfg.milestones.clone() };
            ms.iter().take_while(|(at, _)| *at <= t).last().map_or(k0, |(_, k)| *k as f64)
        }
        ScheduleKind::Fixed => unreachable!(),
    };
    let k = match cfg.rounding {
        Rounding::Nearest => raw.round(),
        Rounding::Floor => (raw + 1e-9).floor(),
    };
    Ok((k as usize).max(2))
}
