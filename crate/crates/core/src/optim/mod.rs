//! AdamW and Lion with per-tensor learning rates from a [`ParamPlan`].

mod schedule;

pub use schedule::{schedule_value, ScheduleKind};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::ParamPlan;
use crate::tensor::{DiffTensor, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adamw,
    Lion,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayMode {
    /// Decay coefficient `η·λ·s_t`, scaled by each tensor's learning rate.
    Coupled,
    /// Decay coefficient `λ·s_t`, the same for every tensor.
    Independent,
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay_mode: DecayMode,
    pub clip_norm: Option<f64>,
    pub schedule: ScheduleKind,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_lr_multiplier: f64,
}

impl OptimizerConfig {
    /// β₁ = 0.9, β₂ = 0.98, ε = 1e-9, clip 1.0, linear schedule, no decay.
    pub fn adamw() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adamw,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            weight_decay: 0.0,
            decay_mode: DecayMode::Off,
            clip_norm: Some(1.0),
            schedule: ScheduleKind::Linear,
            warmup_steps: 100,
            total_steps: 1000,
            batch_lr_multiplier: 1.0,
        }
    }

    /// β₁ = 0.9, β₂ = 0.99.
    pub fn lion() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Lion,
            beta2: 0.99,
            ..Self::adamw()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidOptimizer(m));
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return fail(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if self.kind == OptimizerKind::Adamw && !(self.eps > 0.0) {
            return fail(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return fail(format!("weight decay must be ≥ 0, got {}", self.weight_decay));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return fail(format!("clip norm must be positive, got {c}"));
            }
        }
        if self.warmup_steps == 0 || self.warmup_steps >= self.total_steps {
            return fail(format!(
                "need 0 < warmup_steps < total_steps, got {} and {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if !(self.batch_lr_multiplier > 0.0) || !self.batch_lr_multiplier.is_finite() {
            return fail(format!(
                "batch lr multiplier must be positive, got {}",
                self.batch_lr_multiplier
            ));
        }
        Ok(())
    }

    /// Weight-decay coefficient for a tensor with base lr `lr` at schedule
    /// value `s`.
    pub fn decay_coefficient(&self, lr: f64, s: f64) -> f64 {
        match self.decay_mode {
            DecayMode::Coupled => lr * s * self.batch_lr_multiplier * self.weight_decay,
            DecayMode::Independent => self.weight_decay * s * self.batch_lr_multiplier,
            DecayMode::Off => 0.0,
        }
    }
}

/// Learning-rate multiplier for a batch `ratio` times the reference size.
pub fn batch_lr_multiplier(ratio: f64) -> f64 {
    ratio.sqrt()
}

/// Scales all gradients so their global L2 norm is at most `clip_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients<T: Scalar>(grads: &mut [Vec<T>], clip_norm: Option<f64>) -> Result<f64> {
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| {
            let x = v.widen();
            x * x
        })
        .sum();
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::non_finite("gradient norm"));
    }
    if let Some(c) = clip_norm {
        if norm > c {
            let factor = c / norm;
            for g in grads.iter_mut() {
                for v in g.iter_mut() {
                    *v = T::narrow(v.widen() * factor);
                }
            }
        }
    }
    Ok(norm)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    /// Empty for Lion.
    pub v: Vec<Vec<f64>>,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl OptimizerState {
    pub fn new<T: Scalar>(cfg: &OptimizerConfig, params: &[DiffTensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.len()]).collect::<Vec<_>>();
        OptimizerState {
            step: 0,
            m: zeros(),
            v: match cfg.kind {
                OptimizerKind::Adamw => zeros(),
                OptimizerKind::Lion => Vec::new(),
            },
        }
    }

    /// Applies one update at step `self.step + 1`. On error nothing is
    /// written back and the step counter is unchanged.
    pub fn step<T: Scalar>(
        &mut self,
        cfg: &OptimizerConfig,
        plan: &ParamPlan,
        params: &mut [DiffTensor<T>],
        grads: &[Vec<T>],
    ) -> Result<()> {
        if params.len() != plan.entries.len() || grads.len() != params.len() {
            return Err(Error::InvalidOptimizer(format!(
                "{} tensors, {} plan entries, {} gradients",
                params.len(),
                plan.entries.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.m[i].len() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer_step",
                    left: p.shape().to_vec(),
                    right: vec![g.len()],
                });
            }
        }
        let t = self.step + 1;
        let s = schedule_value(cfg, t)?;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let bc1 = 1.0 - b1.powf(t as f64);
        let bc2 = 1.0 - b2.powf(t as f64);

        let mut new_params: Vec<Vec<T>> = Vec::with_capacity(params.len());
        let mut new_m = Vec::with_capacity(params.len());
        let mut new_v = Vec::with_capacity(self.v.len());
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let entry = &plan.entries[i];
            let eta = entry.lr * s * cfg.batch_lr_multiplier;
            let decay = if entry.decay_eligible {
                cfg.decay_coefficient(entry.lr, s)
            } else {
                0.0
            };
            let mut out = Vec::with_capacity(p.len());
            let mut m = self.m[i].clone();
            match cfg.kind {
                OptimizerKind::Adamw => {
                    let mut v = self.v[i].clone();
                    for j in 0..p.len() {
                        let (theta, gj) = (p.values()[j].widen(), g[j].widen());
                        m[j] = b1 * m[j] + (1.0 - b1) * gj;
                        v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                        let mh = m[j] / bc1;
                        let vh = v[j] / bc2;
                        let mut next = theta - eta * mh / (vh.sqrt() + cfg.eps);
                        if decay != 0.0 {
                            next -= decay * theta;
                        }
                        out.push(next);
                    }
                    new_v.push(v);
                }
                OptimizerKind::Lion => {
                    for j in 0..p.len() {
                        let (theta, gj) = (p.values()[j].widen(), g[j].widen());
                        let u = sign(b1 * m[j] + (1.0 - b1) * gj);
                        let mut next = theta - eta * u;
                        if decay != 0.0 {
                            next -= decay * theta;
                        }
                        m[j] = b2 * m[j] + (1.0 - b2) * gj;
                        out.push(next);
                    }
                }
            }
            if let Some(j) = out.iter().position(|x| !x.is_finite()) {
                return Err(Error::non_finite(format!(
                    "update of {} at coordinate {j}",
                    entry.name
                )));
            }
            new_params.push(out.into_iter().map(T::narrow).collect());
            new_m.push(m);
        }
        for (p, vals) in params.iter_mut().zip(new_params) {
            p.values_mut().copy_from_slice(&vals);
        }
        self.m = new_m;
        if cfg.kind == OptimizerKind::Adamw {
            self.v = new_v;
        }
        self.step = t;
        Ok(())
    }
}
