//! Per-group learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::params::ParamGroup;

use super::TrainError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    #[default]
    WarmupLinearDecay,
    Constant,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    base: [f64; 4],
    warmup_steps: usize,
    total_steps: usize,
    mode: ScheduleMode,
}

impl Schedule {
    pub fn new(base: [f64; 4], warmup_steps: usize, total_steps: usize, mode: ScheduleMode) -> Result<Self, TrainError> {
        if warmup_steps > total_steps {
            return Err(TrainError::Config(format!(
                "warmup_steps {warmup_steps} exceeds total_steps {total_steps}"
            )));
        }
        if base.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(TrainError::Config(format!("learning rates must be finite and >= 0, got {base:?}")));
        }
        Ok(Self {
            base,
            warmup_steps,
            total_steps,
            mode,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_steps
    }

    pub fn mode(&self) -> ScheduleMode {
        self.mode
    }

    pub fn base(&self, group: ParamGroup) -> f64 {
        self.base[group.index()]
    }
}

/// Rate of `group` at `step`: linear warmup to the base rate, then linear
/// decay to zero at `total_steps`.
pub fn lr_at(step: usize, schedule: &Schedule, group: ParamGroup) -> Result<f64, TrainError> {
    if step > schedule.total_steps {
        return Err(TrainError::StepOutOfRange {
            step,
            total: schedule.total_steps,
        });
    }
    let base = schedule.base(group);
    let w = schedule.warmup_steps;
    Ok(match schedule.mode {
        ScheduleMode::Constant => base,
        ScheduleMode::WarmupLinearDecay if step <= w => {
            if w == 0 {
                base
            } else {
                base * step as f64 / w as f64
            }
        }
        ScheduleMode::WarmupLinearDecay => {
            base * (schedule.total_steps - step) as f64 / (schedule.total_steps - w) as f64
        }
    })
}
