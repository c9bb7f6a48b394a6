use std::collections::BTreeSet;

use crate::error::{HiveError, Result};
use crate::params::ParamGroup;

/// Optimizer, schedule and trainability settings for one stage or sub-stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageSchedule {
    pub name: String,
    pub trainable: BTreeSet<ParamGroup>,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_iters: usize,
    pub total_iters: usize,
    pub clip_norm: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

pub fn groups(gs: &[ParamGroup]) -> BTreeSet<ParamGroup> {
    gs.iter().copied().collect()
}

/// Trainable groups of pre-training stage `stage` (1-based).
pub fn pretrain_groups(stage: usize) -> BTreeSet<ParamGroup> {
    use ParamGroup::*;
    match stage {
        1 => groups(&[Projector, BridgeXattn]),
        2 => groups(&[Projector, BridgeXattn, Llm]),
        _ => groups(&[Encoder, Projector, BridgeXattn, Llm]),
    }
}

impl StageSchedule {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(HiveError::Schedule(format!("{}: {m}", self.name)));
        if self.total_iters == 0 {
            return err("total_iters must be positive".into());
        }
        if self.warmup_iters > self.total_iters {
            return err(format!(
                "warmup {} exceeds total {}",
                self.warmup_iters, self.total_iters
            ));
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.peak_lr) {
            return err(format!(
                "need 0 <= min_lr ({}) <= peak_lr ({})",
                self.min_lr, self.peak_lr
            ));
        }
        if !(self.clip_norm > 0.0) {
            return err("clip_norm must be positive".into());
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return err(format!("betas {:?} outside [0, 1)", self.betas));
        }
        if self.batch_size == 0 {
            return err("batch_size must be positive".into());
        }
        if self.weight_decay < 0.0 || !(self.eps > 0.0) {
            return err("weight_decay must be >= 0 and eps > 0".into());
        }
        if self.trainable.is_empty() {
            return err("no trainable groups".into());
        }
        Ok(())
    }

    /// Linear warmup from 0 to `peak_lr`, then cosine decay to `min_lr`.
    pub fn lr_at(&self, iter: usize) -> Result<f64> {
        if iter > self.total_iters {
            return Err(HiveError::Schedule(format!(
                "{}: iteration {iter} beyond total {}",
                self.name, self.total_iters
            )));
        }
        if iter < self.warmup_iters {
            return Ok(self.peak_lr * (iter as f64 / self.warmup_iters as f64));
        }
        let span = self.total_iters - self.warmup_iters;
        let progress = if span == 0 {
            0.0
        } else {
            (iter - self.warmup_iters) as f64 / span as f64
        };
        let c = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        // Written so that c == 1 yields exactly peak and c == 0 exactly min.
        Ok(self.peak_lr * c + self.min_lr * (1.0 - c))
    }

    /// Schedule multiplier `lr / peak_lr` applied to weight decay.
    pub fn lr_fraction(&self, iter: usize) -> Result<f64> {
        let lr = self.lr_at(iter)?;
        Ok(if self.peak_lr > 0.0 { lr / self.peak_lr } else { 0.0 })
    }
}

/// Checks the three pre-training stages against the progressive-unlock contract.
pub fn validate_pretrain(stages: &[StageSchedule; 3]) -> Result<()> {
    for (i, s) in stages.iter().enumerate() {
        s.validate()?;
        let expect = pretrain_groups(i + 1);
        if s.trainable != expect {
            return Err(HiveError::Schedule(format!(
                "stage {} must train {:?}, got {:?}",
                i + 1,
                expect,
                s.trainable
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(warmup: usize, total: usize) -> StageSchedule {
        StageSchedule {
            name: "t".into(),
            trainable: pretrain_groups(1),
            peak_lr: 1e-3,
            min_lr: 1e-4,
            warmup_iters: warmup,
            total_iters: total,
            clip_norm: 1.0,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.0,
            batch_size: 4,
        }
    }

    #[test]
    fn endpoints_exact() {
        let s = sched(70, 2326);
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert_eq!(s.lr_at(70).unwrap(), 1e-3);
        assert_eq!(s.lr_at(2326).unwrap(), 1e-4);
        assert!(s.lr_at(2327).is_err());
    }

    #[test]
    fn monotone_after_warmup() {
        let s = sched(10, 300);
        let mut prev = f64::INFINITY;
        for i in 10..=300 {
            let lr = s.lr_at(i).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn stages_unlock_monotonically() {
        assert!(pretrain_groups(1).is_subset(&pretrain_groups(2)));
        assert!(pretrain_groups(2).is_subset(&pretrain_groups(3)));
        assert!(!pretrain_groups(3).contains(&ParamGroup::ClassifierHead));
    }

    #[test]
    fn invalid_schedules() {
        assert!(sched(20, 10).validate().is_err());
        let mut s = sched(1, 10);
        s.min_lr = 1.0;
        assert!(s.validate().is_err());
        let s = sched(1, 10);
        let mut stages = [s.clone(), s.clone(), s];
        assert!(validate_pretrain(&stages).is_err());
        stages[1].trainable = pretrain_groups(2);
        stages[2].trainable = pretrain_groups(3);
        validate_pretrain(&stages).unwrap();
    }
}
