use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// Linear warmup, plateau, exponential anneal to `final_lr`, then constant.
    Transformer,
    /// Linear warmup, then exponential decay with no floor.
    Conformer,
    /// Linear warmup, then constant.
    Finetune,
}

/// Piecewise learning-rate schedule over iteration counts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub peak: f64,
    pub warmup_iters: u64,
    /// End of the constant segment (transformer only).
    pub plateau_end: u64,
    pub final_lr: f64,
    /// Iteration at which the decay reaches `final_lr`.
    pub total_iters: u64,
    /// Conformer decay half-life in iterations; derived from
    /// `final_lr` at `total_iters` when absent.
    #[serde(default)]
    pub half_life: Option<f64>,
}

impl LrSchedule {
    pub fn transformer() -> Self {
        Self {
            kind: ScheduleKind::Transformer,
            peak: 1e-4,
            warmup_iters: 30_000,
            plateau_end: 200_000,
            final_lr: 1e-6,
            total_iters: 300_000,
            half_life: None,
        }
    }

    pub fn conformer() -> Self {
        Self {
            kind: ScheduleKind::Conformer,
            peak: 1.7e-2,
            warmup_iters: 15_000,
            plateau_end: 15_000,
            final_lr: 1e-6,
            total_iters: 300_000,
            half_life: None,
        }
    }

    pub fn finetune() -> Self {
        Self {
            kind: ScheduleKind::Finetune,
            peak: 1e-5,
            warmup_iters: 200,
            plateau_end: 10_000,
            final_lr: 1e-5,
            total_iters: 10_000,
            half_life: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.peak.is_finite()
            && self.peak > 0.0
            && self.final_lr.is_finite()
            && self.final_lr > 0.0
            && self.half_life.is_none_or(|h| h.is_finite() && h > 0.0)
            && match self.kind {
                ScheduleKind::Transformer => self.warmup_iters <= self.plateau_end && self.plateau_end < self.total_iters,
                ScheduleKind::Conformer => self.warmup_iters < self.total_iters || self.half_life.is_some(),
                ScheduleKind::Finetune => true,
            };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("inconsistent learning-rate schedule {self:?}")))
        }
    }

    /// Conformer decay per iteration, `lr = peak · exp(−rate · (i − warmup))`.
    pub fn decay_rate(&self) -> f64 {
        match self.half_life {
            Some(h) => std::f64::consts::LN_2 / h,
            None => (self.peak / self.final_lr).ln() / (self.total_iters - self.warmup_iters) as f64,
        }
    }

    pub fn lr(&self, iter: u64) -> f64 {
        if iter < self.warmup_iters {
            return self.peak * (iter as f64 / self.warmup_iters as f64);
        }
        match self.kind {
            ScheduleKind::Finetune => self.peak,
            ScheduleKind::Conformer => self.peak * (-self.decay_rate() * (iter - self.warmup_iters) as f64).exp(),
            ScheduleKind::Transformer => {
                if iter <= self.plateau_end {
                    self.peak
                } else if iter >= self.total_iters {
                    self.final_lr
                } else {
                    let frac = (iter - self.plateau_end) as f64 / (self.total_iters - self.plateau_end) as f64;
                    self.peak * (self.final_lr / self.peak).powf(frac)
                }
            }
        }
    }

    /// Iterations at which the formula changes segment.
    pub fn breakpoints(&self) -> Vec<u64> {
        match self.kind {
            ScheduleKind::Transformer => vec![self.warmup_iters, self.plateau_end, self.total_iters],
            ScheduleKind::Conformer | ScheduleKind::Finetune => vec![self.warmup_iters],
        }
    }

    /// Left and right limits at a breakpoint, evaluating each adjoining
    /// segment's formula at `iter`.
    pub fn limits(&self, iter: u64) -> (f64, f64) {
        let warm = self.peak * (iter as f64 / self.warmup_iters.max(1) as f64);
        let anneal = |i: u64| {
            let frac = (i as f64 - self.plateau_end as f64) / (self.total_iters - self.plateau_end) as f64;
            self.peak * (self.final_lr / self.peak).powf(frac)
        };
        match self.kind {
            ScheduleKind::Transformer if iter == self.plateau_end => (self.peak, anneal(iter)),
            ScheduleKind::Transformer if iter == self.total_iters => (anneal(iter), self.final_lr),
            ScheduleKind::Transformer | ScheduleKind::Finetune => (warm, self.peak),
            ScheduleKind::Conformer => (warm, self.peak * (-self.decay_rate() * (iter - self.warmup_iters) as f64).exp()),
        }
    }
}

pub fn lr_transformer(iter: u64) -> f64 {
    LrSchedule::transformer().lr(iter)
}

pub fn lr_conformer(iter: u64) -> f64 {
    LrSchedule::conformer().lr(iter)
}

pub fn lr_finetune(iter: u64) -> f64 {
    LrSchedule::finetune().lr(iter)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs())
    }

    #[test]
    fn transformer_points() {
        assert_eq!(lr_transformer(0), 0.0);
        assert_eq!(lr_transformer(15_000), 5e-5);
        assert_eq!(lr_transformer(100_000), 1e-4);
        assert_eq!(lr_transformer(300_000), 1e-6);
        assert_eq!(lr_transformer(400_000), 1e-6);
        assert!(close(lr_transformer(250_000), 1e-5, 1e-12));
    }

    #[test]
    fn conformer_points() {
        assert_eq!(lr_conformer(7_500), 8.5e-3);
        assert_eq!(lr_conformer(15_000), 1.7e-2);
        assert!(close(lr_conformer(300_000), 1e-6, 1e-12));
        let half = LrSchedule {
            half_life: Some(1000.0),
            ..LrSchedule::conformer()
        };
        assert!(close(half.lr(16_000), 8.5e-3, 1e-14));
    }

    #[test]
    fn finetune_points() {
        assert_eq!(lr_finetune(100), 5e-6);
        assert_eq!(lr_finetune(200), 1e-5);
        assert_eq!(lr_finetune(9_999), 1e-5);
    }

    #[test]
    fn continuous_at_breakpoints() {
        for s in [LrSchedule::transformer(), LrSchedule::conformer(), LrSchedule::finetune()] {
            s.validate().unwrap();
            for b in s.breakpoints() {
                let (l, r) = s.limits(b);
                assert!(close(l, r, 1e-15), "{:?} at {b}: {l} vs {r}", s.kind);
                assert!(close(s.lr(b), r, 1e-15));
            }
        }
    }
}
