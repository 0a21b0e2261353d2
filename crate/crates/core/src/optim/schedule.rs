use serde::{Deserialize, Serialize};

use super::OptimizerConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Linear warmup, then linear decay to zero.
    Linear,
    /// Linear warmup, then half-cosine decay to zero.
    Cosine,
}

/// Learning-rate multiplier `s_t ∈ [0, 1]` at step `t`.
pub fn schedule_value(cfg: &OptimizerConfig, t: u64) -> Result<f64> {
    let (w, total) = (cfg.warmup_steps, cfg.total_steps);
    if t > total {
        return Err(Error::ScheduleOverrun { step: t, total });
    }
    if t <= w {
        return Ok(t as f64 / w as f64);
    }
    let frac = (t - w) as f64 / (total - w) as f64;
    Ok(match cfg.schedule {
        ScheduleKind::Linear => 1.0 - frac,
        ScheduleKind::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()),
    })
}
