use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::OptimizerConfig;
use crate::param::{make_param_plan, ParamPlan, Parameterization, PlanOverrides};

/// Bumped whenever a change to the engine alters training results, so
/// cached sweep cells from older builds are not reused.
pub const ENGINE_REVISION: &str = "mutransfer-engine-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanSpec {
    pub mode: Parameterization,
    pub alpha: f64,
    pub proxy_width: usize,
    #[serde(default)]
    pub overrides: PlanOverrides,
}

impl PlanSpec {
    pub fn build(&self, model: &ModelConfig) -> Result<ParamPlan> {
        make_param_plan(model, self.mode, self.alpha, self.proxy_width, self.overrides)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointPolicy {
    /// Save every this many steps.
    #[serde(default)]
    pub interval: Option<u64>,
    /// Save after the last step.
    #[serde(default)]
    pub final_checkpoint: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub plan: PlanSpec,
    pub optimizer: OptimizerConfig,
    /// Directory holding `manifest.toml` and the token shards.
    pub data: PathBuf,
    pub batch_size: usize,
    pub seed: u64,
    pub eval_interval: u64,
    pub eval_sequences: usize,
    /// Stop after this many steps while keeping the schedule of
    /// `optimizer.total_steps`.
    #[serde(default)]
    pub max_steps: Option<u64>,
    #[serde(default)]
    pub checkpoint: CheckpointPolicy,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        if self.batch_size == 0 || self.eval_interval == 0 || self.eval_sequences == 0 {
            return Err(Error::InvalidRun(
                "batch_size, eval_interval and eval_sequences must be positive".into(),
            ));
        }
        if let Some(0) = self.checkpoint.interval {
            return Err(Error::InvalidRun("checkpoint interval must be positive".into()));
        }
        Ok(())
    }

    /// Number of optimizer steps this run performs.
    pub fn steps(&self) -> u64 {
        self.max_steps
            .map_or(self.optimizer.total_steps, |m| m.min(self.optimizer.total_steps))
    }

    /// Hex SHA-256 of the canonical JSON form and [`ENGINE_REVISION`].
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("run configs serialize");
        let mut h = Sha256::new();
        h.update(ENGINE_REVISION.as_bytes());
        h.update([0]);
        h.update(&json);
        hex::encode(h.finalize())
    }

    /// Copy with another width, learning rate and seed; everything else kept.
    pub fn cell(&self, width: usize, alpha: f64, seed: u64) -> RunConfig {
        let mut c = self.clone();
        c.model = c.model.with_width(width);
        c.plan.alpha = alpha;
        c.seed = seed;
        c
    }
}
