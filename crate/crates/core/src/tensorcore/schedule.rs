use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Polynomial learning-rate decay:
/// `end + (initial − end)·(1 − step/total)^power`, clamped at `total`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial_lr: f64,
    pub total_steps: u64,
    pub power: f64,
    pub end_lr: f64,
}

impl LrSchedule {
    pub fn new(initial_lr: f64, total_steps: u64) -> Result<Self> {
        let s = Self {
            initial_lr,
            total_steps,
            ..Self::default()
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::config("learning-rate schedule needs total_steps ≥ 1"));
        }
        if !(self.initial_lr >= self.end_lr && self.end_lr >= 0.0 && self.power > 0.0) {
            return Err(Error::config(format!(
                "invalid learning-rate schedule: initial {} end {} power {}",
                self.initial_lr, self.end_lr, self.power
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if step >= self.total_steps {
            return self.end_lr;
        }
        let remaining = 1.0 - step as f64 / self.total_steps as f64;
        self.end_lr + (self.initial_lr - self.end_lr) * remaining.powf(self.power)
    }
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial_lr: 1e-3,
            total_steps: 150,
            power: 0.9,
            end_lr: 0.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        let s = LrSchedule::new(0.001, 100).unwrap();
        assert_eq!(s.lr_at(0), 0.001);
        assert_eq!(s.lr_at(100), 0.0);
        assert_eq!(s.lr_at(250), 0.0);
        let mid = s.lr_at(50);
        assert!((mid - 0.001 * 0.5f64.powf(0.9)).abs() < 1e-15);
        assert!((mid - 5.359e-4).abs() < 1e-7);
    }

    #[test]
    fn non_increasing() {
        let s = LrSchedule::new(0.001, 37).unwrap();
        let lrs: Vec<f64> = (0..=37).map(|t| s.lr_at(t)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn rejects_zero_steps() {
        assert!(LrSchedule::new(0.001, 0).is_err());
    }
}
