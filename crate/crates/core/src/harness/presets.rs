//! Ready-made configurations sized for a single CPU.

use std::path::PathBuf;

use super::{CheckpointPolicy, PlanSpec, RunConfig, SweepConfig};
use crate::model::ModelConfig;
use crate::optim::OptimizerConfig;
use crate::param::{Parameterization, PlanOverrides};

pub const DESK_VOCAB: usize = 256;
pub const DESK_CONTEXT: usize = 64;
pub const DESK_HEAD_DIM: usize = 32;
pub const DESK_PROXY_WIDTH: usize = 64;
pub const DESK_WIDTHS: [usize; 3] = [64, 128, 256];

/// 2^-10 through 2^-2 at 4x spacing.
pub fn desk_alphas() -> Vec<f64> {
    (0..5).map(|i| 2f64.powi(-10 + 2 * i)).collect()
}

/// Sizes of a desk run that vary between the full and the reduced preset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeskScale {
    pub depth: usize,
    pub batch_size: usize,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub eval_interval: u64,
    pub eval_sequences: usize,
}

impl DeskScale {
    /// L = 4, B = 32, 2000 steps with 200 of warmup.
    pub const FULL: DeskScale = DeskScale {
        depth: 4,
        batch_size: 32,
        total_steps: 2000,
        warmup_steps: 200,
        eval_interval: 250,
        eval_sequences: 128,
    };

    /// Half the depth, batch and steps of [`DeskScale::FULL`].
    pub const REDUCED: DeskScale = DeskScale {
        depth: 2,
        batch_size: 16,
        total_steps: 1000,
        warmup_steps: 100,
        eval_interval: 125,
        eval_sequences: 128,
    };
}

/// μP run at the proxy width with α = 2^-6.
pub fn desk_run(data: impl Into<PathBuf>, scale: DeskScale) -> RunConfig {
    let mut optimizer = OptimizerConfig::adamw();
    optimizer.total_steps = scale.total_steps;
    optimizer.warmup_steps = scale.warmup_steps;
    RunConfig {
        model: ModelConfig::new(
            DESK_VOCAB,
            DESK_CONTEXT,
            scale.depth,
            DESK_PROXY_WIDTH,
            DESK_HEAD_DIM,
        ),
        plan: PlanSpec {
            mode: Parameterization::MupRelative,
            alpha: 2f64.powi(-6),
            proxy_width: DESK_PROXY_WIDTH,
            overrides: PlanOverrides::default(),
        },
        optimizer,
        data: data.into(),
        batch_size: scale.batch_size,
        seed: 0,
        eval_interval: scale.eval_interval,
        eval_sequences: scale.eval_sequences,
        max_steps: None,
        checkpoint: CheckpointPolicy::default(),
    }
}

/// Widths {64, 128, 256} by the desk α grid, seeds 0, 1 and 2.
pub fn desk_sweep(data: impl Into<PathBuf>, scale: DeskScale) -> SweepConfig {
    SweepConfig {
        base: desk_run(data, scale),
        widths: DESK_WIDTHS.to_vec(),
        alphas: desk_alphas(),
        seeds: vec![0, 1, 2],
    }
}
