use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::RunConfig;
use crate::data::{BatchSpec, ShardSet};
use crate::error::{Error, Result};
use crate::model::{
    bind_params, build_model, forward, forward_loss, save_checkpoint, ForwardOptions, ParamSet,
    TokenBatch,
};
use crate::optim::{clip_gradients, OptimizerState};
use crate::param::{init_params, ParamPlan};
use crate::tensor::Graph;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    /// `(step, train loss)`, where step `t` is the loss of the batch that
    /// produced update `t`.
    pub losses: Vec<(u64, f64)>,
    /// `(step, validation loss)`; step 0 is before any update.
    pub evals: Vec<(u64, f64)>,
    pub best_val_loss: Option<f64>,
    pub diverged: bool,
    pub wall_clock_secs: f64,
    pub checkpoints: Vec<PathBuf>,
}

impl RunRecord {
    /// Minimum finite validation loss.
    pub fn best_of(evals: &[(u64, f64)]) -> Option<f64> {
        evals
            .iter()
            .map(|&(_, l)| l)
            .filter(|l| l.is_finite())
            .fold(None, |best: Option<f64>, l| Some(best.map_or(l, |b| b.min(l))))
    }
}

/// Errors that mean the run blew up numerically rather than being misconfigured.
fn is_numeric_failure(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. } | Error::DegenerateMask { .. })
}

/// Mutable state of one run.
pub struct Trainer<'a> {
    cfg: RunConfig,
    shards: &'a ShardSet,
    params: ParamSet<f32>,
    plan: ParamPlan,
    state: OptimizerState,
    validation: Vec<TokenBatch>,
}

/// Outcome of a single step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepOutcome {
    Loss(f64),
    Diverged,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &RunConfig, shards: &'a ShardSet) -> Result<Self> {
        cfg.validate()?;
        if shards.vocab_size() > cfg.model.vocab_size {
            return Err(Error::InvalidRun(format!(
                "data vocabulary {} exceeds model vocabulary {}",
                shards.vocab_size(),
                cfg.model.vocab_size
            )));
        }
        if shards.context_len() != cfg.model.context_len {
            return Err(Error::InvalidRun(format!(
                "data context {} differs from model context {}",
                shards.context_len(),
                cfg.model.context_len
            )));
        }
        let mut params = build_model::<f32>(&cfg.model)?;
        let plan = cfg.plan.build(&cfg.model)?;
        init_params(&mut params, &plan, cfg.seed)?;
        let state = OptimizerState::new(&cfg.optimizer, params.tensors());
        let validation = shards.validation_batches(cfg.eval_sequences, cfg.batch_size)?;
        Ok(Trainer {
            cfg: cfg.clone(),
            shards,
            params,
            plan,
            state,
            validation,
        })
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    pub fn plan(&self) -> &ParamPlan {
        &self.plan
    }

    /// Updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.state.step
    }

    pub fn validation(&self) -> &[TokenBatch] {
        &self.validation
    }

    /// Mean validation loss over all held-out targets.
    pub fn evaluate(&self) -> Result<f64> {
        let (mut total, mut count) = (0.0, 0usize);
        for b in &self.validation {
            let n = b.mask.iter().filter(|&&m| m).count();
            if n == 0 {
                continue;
            }
            total += forward_loss(&self.params, b)? * n as f64;
            count += n;
        }
        if count == 0 {
            return Err(Error::NoValidTargets);
        }
        Ok(total / count as f64)
    }

    /// One forward, backward, clip and update. Non-finite values anywhere
    /// are reported as divergence and leave the parameters unchanged.
    pub fn train_step(&mut self) -> Result<StepOutcome> {
        let spec = BatchSpec {
            seed: self.cfg.seed,
            step: self.state.step,
            batch_size: self.cfg.batch_size,
        };
        let batch = self.shards.read_batch(spec)?.to_token_batch()?;
        let mut graph = Graph::<f32>::new();
        let vars = bind_params(&mut graph, &self.params);
        let out = match forward(&mut graph, &self.params, &vars, &batch, ForwardOptions::default()) {
            Err(e) if is_numeric_failure(&e) => return Ok(StepOutcome::Diverged),
            other => other?,
        };
        let loss = graph.scalar(out.loss);
        if !loss.is_finite() {
            return Ok(StepOutcome::Diverged);
        }
        graph.backward(out.loss)?;
        let mut grads: Vec<Vec<f32>> = vars
            .iter()
            .zip(self.params.tensors())
            .map(|(&v, t)| graph.take_grad(v).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect();
        drop(graph);
        match clip_gradients(&mut grads, self.cfg.optimizer.clip_norm) {
            Err(e) if is_numeric_failure(&e) => return Ok(StepOutcome::Diverged),
            other => other?,
        };
        match self.state.step(
            &self.cfg.optimizer,
            &self.plan,
            self.params.tensors_mut(),
            &grads,
        ) {
            Err(e) if is_numeric_failure(&e) => Ok(StepOutcome::Diverged),
            Err(e) => Err(e),
            Ok(()) => Ok(StepOutcome::Loss(loss)),
        }
    }
}

/// Runs `cfg` to completion. With `out_dir`, checkpoints follow the
/// configured policy and are written under `out_dir/checkpoints`.
pub fn train(cfg: &RunConfig, shards: &ShardSet, out_dir: Option<&Path>) -> Result<RunRecord> {
    let started = Instant::now();
    let mut trainer = Trainer::new(cfg, shards)?;
    let mut record = RunRecord {
        config_hash: cfg.hash(),
        losses: Vec::new(),
        evals: Vec::new(),
        best_val_loss: None,
        diverged: false,
        wall_clock_secs: 0.0,
        checkpoints: Vec::new(),
    };
    let save = |trainer: &Trainer, record: &mut RunRecord| -> Result<()> {
        if let Some(dir) = out_dir {
            let path = dir
                .join("checkpoints")
                .join(format!("step-{:07}.json", trainer.step_count()));
            save_checkpoint(&path, trainer.params(), trainer.step_count())?;
            record.checkpoints.push(path);
        }
        Ok(())
    };

    let initial = trainer.evaluate()?;
    if initial.is_finite() {
        record.evals.push((0, initial));
    }
    let steps = cfg.steps();
    for _ in 0..steps {
        match trainer.train_step()? {
            StepOutcome::Diverged => {
                record.diverged = true;
                break;
            }
            StepOutcome::Loss(l) => record.losses.push((trainer.step_count(), l)),
        }
        let t = trainer.step_count();
        if t % cfg.eval_interval == 0 || t == steps {
            match trainer.evaluate() {
                Ok(v) if v.is_finite() => record.evals.push((t, v)),
                Ok(_) => {
                    record.diverged = true;
                    break;
                }
                Err(e) if is_numeric_failure(&e) => {
                    record.diverged = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if cfg.checkpoint.interval.is_some_and(|k| t % k == 0) {
            save(&trainer, &mut record)?;
        }
    }
    let saved_here = trainer.step_count() > 0
        && cfg
            .checkpoint
            .interval
            .is_some_and(|k| trainer.step_count() % k == 0);
    if cfg.checkpoint.final_checkpoint && !record.diverged && !saved_here {
        save(&trainer, &mut record)?;
    }
    record.best_val_loss = RunRecord::best_of(&record.evals);
    record.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(record)
}

/// Writes `config.json` and `record.json` into `dir`.
pub fn write_run_dir(dir: &Path, cfg: &RunConfig, record: &RunRecord) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, value) in [
        ("config.json", serde_json::to_string_pretty(cfg)),
        ("record.json", serde_json::to_string_pretty(record)),
    ] {
        let path = dir.join(name);
        let text = value.map_err(|e| Error::format(&path, e.to_string()))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
