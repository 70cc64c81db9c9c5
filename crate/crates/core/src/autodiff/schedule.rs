//! Learning-rate schedules for the two training procedures: step decay for
//! the shape codec, linear warmup/decay for the matcher.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    /// `lr0 * factor^(epoch / every)`; `step` is the epoch index.
    StepDecay,
    /// Linear 0 -> lr0 over the warmup steps, then linear decay to 0 at
    /// `total` steps.
    WarmupLinear,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "step_decay" => Ok(ScheduleKind::StepDecay),
            "warmup_linear" => Ok(ScheduleKind::WarmupLinear),
            other => Err(Error::Config(format!("unknown lr schedule kind: {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ScheduleConfig {
    pub base_lr: f32,
    /// StepDecay: epochs between decays.
    pub decay_every: u64,
    /// StepDecay: multiplicative factor per decay.
    pub decay_factor: f32,
    /// WarmupLinear: steps to reach base_lr.
    pub warmup: u64,
    /// WarmupLinear: step at which the rate reaches 0.
    pub total: u64,
}

pub fn lr_schedule(kind: ScheduleKind, step: u64, cfg: &ScheduleConfig) -> f32 {
    match kind {
        ScheduleKind::StepDecay => {
            cfg.base_lr * cfg.decay_factor.powi((step / cfg.decay_every.max(1)) as i32)
        }
        ScheduleKind::WarmupLinear => {
            if cfg.warmup > 0 && step < cfg.warmup {
                cfg.base_lr * step as f32 / cfg.warmup as f32
            } else if step >= cfg.total {
                0.0
            } else {
                let span = (cfg.total - cfg.warmup).max(1);
                cfg.base_lr * (cfg.total - step) as f32 / span as f32
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_decay_drops_by_90_percent_every_50_epochs() {
        let cfg = ScheduleConfig {
            base_lr: 1e-3,
            decay_every: 50,
            decay_factor: 0.1,
            warmup: 0,
            total: 0,
        };
        assert_eq!(lr_schedule(ScheduleKind::StepDecay, 0, &cfg), 1e-3);
        assert_eq!(lr_schedule(ScheduleKind::StepDecay, 49, &cfg), 1e-3);
        assert!((lr_schedule(ScheduleKind::StepDecay, 50, &cfg) - 1e-4).abs() < 1e-10);
        assert!((lr_schedule(ScheduleKind::StepDecay, 149, &cfg) - 1e-5).abs() < 1e-11);
    }

    #[test]
    fn warmup_linear_boundaries() {
        let cfg = ScheduleConfig {
            base_lr: 1e-4,
            decay_every: 0,
            decay_factor: 0.0,
            warmup: 100,
            total: 1000,
        };
        assert_eq!(lr_schedule(ScheduleKind::WarmupLinear, 0, &cfg), 0.0);
        assert_eq!(lr_schedule(ScheduleKind::WarmupLinear, 100, &cfg), 1e-4);
        assert_eq!(lr_schedule(ScheduleKind::WarmupLinear, 1000, &cfg), 0.0);
        let mid = lr_schedule(ScheduleKind::WarmupLinear, 550, &cfg);
        assert!((mid - 0.5e-4).abs() < 1e-10);
    }

    #[test]
    fn unknown_kind_errors() {
        assert!("cosine".parse::<ScheduleKind>().is_err());
        assert_eq!("step_decay".parse::<ScheduleKind>().unwrap(), ScheduleKind::StepDecay);
    }
}
