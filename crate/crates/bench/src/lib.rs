//! Fixtures shared by the engine benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mutransfer_core::harness::{desk_run, DeskScale};
use mutransfer_core::model::{build_model, ModelConfig, TokenBatch};
use mutransfer_core::param::init_params;
use mutransfer_core::{ParamPlan, ParamSet, Result};

/// Desk-preset model at `width` with its initialized parameters and plan.
pub fn desk_model(width: usize) -> Result<(ParamSet<f32>, ParamPlan)> {
    let cfg = desk_run("unused", DeskScale::REDUCED);
    let model = cfg.model.with_width(width);
    let plan = cfg.plan.build(&model)?;
    let mut params = build_model::<f32>(&model)?;
    init_params(&mut params, &plan, 0)?;
    Ok((params, plan))
}

/// Uniform random tokens with every target valid.
pub fn random_batch(cfg: &ModelConfig, batch: usize, seed: u64) -> TokenBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = batch * cfg.context_len;
    let inputs = (0..n).map(|_| rng.gen_range(0..cfg.vocab_size)).collect();
    let targets = (0..n).map(|_| rng.gen_range(0..cfg.vocab_size)).collect();
    TokenBatch::new(batch, cfg.context_len, inputs, targets, vec![true; n])
        .expect("batch extents match the config")
}
