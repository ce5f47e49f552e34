//! Per-task update periods at epoch granularity.
//!
//! Task `t` is active in epoch `e` (0-based) when `e % nu_t == 0`. An inactive
//! task gets weight zero and its loss is left out of the graph, so neither its
//! head nor the shared trunk receives gradient from it that epoch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::{PerTask, Task};

pub const MIN_PERIOD: u32 = 1;
pub const MAX_PERIOD: u32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AsyncSchedule {
    pub nu_seg: u32,
    pub nu_det: u32,
}

impl Default for AsyncSchedule {
    fn default() -> Self {
        Self { nu_seg: 1, nu_det: 1 }
    }
}

impl AsyncSchedule {
    pub fn new(nu_seg: u32, nu_det: u32) -> Result<Self> {
        let s = Self { nu_seg, nu_det };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for (task, nu) in self.periods().iter() {
            if !(MIN_PERIOD..=MAX_PERIOD).contains(nu) {
                return Err(Error::Schedule(format!(
                    "period for {task} is {nu}, expected {MIN_PERIOD}..={MAX_PERIOD}"
                )));
            }
        }
        Ok(())
    }

    pub fn periods(&self) -> PerTask<u32> {
        PerTask::new(self.nu_seg, self.nu_det)
    }

    pub fn is_active(&self, task: Task, epoch: u64) -> bool {
        epoch % u64::from(*self.periods().get(task)) == 0
    }

    pub fn mask(&self, epoch: u64) -> PerTask<bool> {
        PerTask::new(self.is_active(Task::Seg, epoch), self.is_active(Task::Det, epoch))
    }

    /// Base weights with inactive tasks zeroed.
    pub fn apply(&self, base: PerTask<f64>, epoch: u64) -> PerTask<f64> {
        let m = self.mask(epoch);
        base.map(|t, w| if *m.get(t) { *w } else { 0.0 })
    }

    pub fn is_identity(&self) -> bool {
        self.nu_seg == 1 && self.nu_det == 1
    }
}

/// Nearest integer with ties rounded up.
pub fn round_frequency(x: f64) -> Result<u32> {
    if !x.is_finite() || x < f64::from(MIN_PERIOD) || x > f64::from(MAX_PERIOD) {
        return Err(Error::Schedule(format!(
            "frequency {x} outside {MIN_PERIOD}..={MAX_PERIOD}"
        )));
    }
    let r = (x + 0.5).floor() as u32;
    Ok(r.clamp(MIN_PERIOD, MAX_PERIOD))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn det_every_fifth_epoch() {
        let s = AsyncSchedule::new(1, 5).unwrap();
        for t in [0, 5, 10] {
            assert!(s.is_active(Task::Det, t));
        }
        for t in 1..5 {
            assert!(!s.is_active(Task::Det, t));
            assert_eq!(s.apply(PerTask::splat(1.0), t), PerTask::new(1.0, 0.0));
        }
        assert!((0..60).all(|t| s.is_active(Task::Seg, t)));
    }

    #[test]
    fn unit_periods_are_identity() {
        let s = AsyncSchedule::new(1, 1).unwrap();
        let w = PerTask::new(0.3, 0.7);
        assert!((0..100).all(|t| s.apply(w, t) == w));
    }

    #[test]
    fn out_of_range_periods_rejected() {
        assert!(AsyncSchedule::new(0, 1).is_err());
        assert!(AsyncSchedule::new(1, 11).is_err());
    }

    #[test]
    fn rounding_half_up() {
        assert_eq!(round_frequency(2.4).unwrap(), 2);
        assert_eq!(round_frequency(2.5).unwrap(), 3);
        assert_eq!(round_frequency(10.0).unwrap(), 10);
        assert_eq!(round_frequency(1.0).unwrap(), 1);
        assert!(round_frequency(0.5).is_err());
        assert!(round_frequency(f64::NAN).is_err());
    }
}
