//! Per-tensor initialization and learning-rate plans.
//!
//! Under μP every hidden matrix of a width-`M` model gets learning rate
//! `α·P/M`, where `P` is the proxy width at which `α` was tuned. Init
//! variances shrink as `1/M` for hidden matrices and `1/M²` for the
//! unembedding, so that logits start small and stay width-stable.

use std::fmt::Write as _;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{param_specs, AttnScaleMode, ModelConfig, ParamRole, ParamSet};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    /// Learning rates relative to a proxy width `P`.
    MupRelative,
    /// Hidden learning rate `α / fan_in`.
    MupAbsolute,
    /// One global learning rate and `1/fan_in` init variances.
    Stp,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanOverrides {
    /// Query projections start at exactly zero.
    pub zero_query_init: bool,
    /// Unembedding init variance `1/M` instead of `1/M²`.
    pub standard_unembed_init: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Init {
    Normal { var: f64 },
    Zeros,
    Ones,
}

impl Init {
    pub fn std(&self) -> f64 {
        match self {
            Init::Normal { var } => var.sqrt(),
            Init::Zeros | Init::Ones => 0.0,
        }
    }

    pub fn var(&self) -> f64 {
        match self {
            Init::Normal { var } => *var,
            Init::Zeros | Init::Ones => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
    pub init: Init,
    pub lr: f64,
    pub decay_eligible: bool,
}

impl PlanEntry {
    pub fn init_std(&self) -> f64 {
        self.init.std()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamPlan {
    pub mode: Parameterization,
    pub proxy_width: usize,
    pub alpha: f64,
    /// Same order as the tensors of the model's [`ParamSet`].
    pub entries: Vec<PlanEntry>,
    pub attn_scale: f64,
    pub overrides: PlanOverrides,
}

impl ParamPlan {
    pub fn entry(&self, name: &str) -> Result<&PlanEntry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::InvalidPlan(format!("no plan entry for tensor {name:?}")))
    }

    /// Checks that the plan has one entry per tensor of `params`, in order.
    pub fn check_covers<T: Scalar>(&self, params: &ParamSet<T>) -> Result<()> {
        if self.entries.len() != params.len() {
            return Err(Error::InvalidPlan(format!(
                "plan has {} entries for {} tensors",
                self.entries.len(),
                params.len()
            )));
        }
        for (e, (spec, _)) in self.entries.iter().zip(params.iter()) {
            if e.name != spec.name || e.shape != spec.shape {
                return Err(Error::InvalidPlan(format!(
                    "plan entry {} {:?} does not match tensor {} {:?}",
                    e.name, e.shape, spec.name, spec.shape
                )));
            }
        }
        Ok(())
    }

    /// Aligned table of every entry.
    pub fn to_text(&self) -> String {
        let name_w = self.entries.iter().map(|e| e.name.len()).max().unwrap_or(4).max(6);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "mode={:?} alpha={} proxy_width={} attn_scale={}",
            self.mode, self.alpha, self.proxy_width, self.attn_scale
        );
        let _ = writeln!(
            out,
            "{:<name_w$}  {:<12}  {:>12}  {:>12}  decay",
            "tensor", "shape", "init_std", "lr"
        );
        for e in &self.entries {
            let shape = format!("{:?}", e.shape);
            let init = match e.init {
                Init::Normal { .. } => format!("{:.6e}", e.init_std()),
                Init::Zeros => "zeros".into(),
                Init::Ones => "ones".into(),
            };
            let _ = writeln!(
                out,
                "{:<name_w$}  {:<12}  {:>12}  {:>12.6e}  {}",
                e.name, shape, init, e.lr, e.decay_eligible
            );
        }
        out
    }

    /// One CSV row per entry: tensor, shape, init, init_std, lr, decay.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let csv_err = |e: csv::Error| Error::InvalidPlan(format!("csv: {e}"));
        w.write_record(["tensor", "shape", "init", "init_std", "lr", "decay"])
            .map_err(csv_err)?;
        for e in &self.entries {
            let shape = e
                .shape
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x");
            let init = match e.init {
                Init::Normal { .. } => "normal",
                Init::Zeros => "zeros",
                Init::Ones => "ones",
            };
            w.write_record([
                e.name.clone(),
                shape,
                init.to_string(),
                format!("{:e}", e.init_std()),
                format!("{:e}", e.lr),
                e.decay_eligible.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()
            .map_err(|e| Error::InvalidPlan(format!("csv: {e}")))?;
        Ok(())
    }
}

/// `1/D` under μP, `1/√D` otherwise.
pub fn attention_scale(mode: AttnScaleMode, head_dim: usize) -> f64 {
    mode.scale(head_dim)
}

/// Builds the per-tensor plan for `cfg`.
///
/// `stp` requires a model with the `1/√D` attention scale; the μP modes
/// accept either scale so the attention-scale ablation can be expressed.
pub fn make_param_plan(
    cfg: &ModelConfig,
    mode: Parameterization,
    alpha: f64,
    proxy_width: usize,
    overrides: PlanOverrides,
) -> Result<ParamPlan> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidPlan(format!(
            "alpha must be positive and finite, got {alpha}"
        )));
    }
    if proxy_width == 0 {
        return Err(Error::InvalidPlan("proxy width must be positive".into()));
    }
    if mode == Parameterization::Stp && cfg.attn_scale != AttnScaleMode::Standard {
        return Err(Error::InvalidPlan(
            "stp needs the 1/sqrt(D) attention scale".into(),
        ));
    }
    let specs = param_specs(cfg)?;
    let m = cfg.width as f64;
    let p = proxy_width as f64;
    let mut entries = Vec::with_capacity(specs.len());
    for spec in &specs {
        let fan_in = spec.fan_in as f64;
        let init = match spec.role {
            ParamRole::Bias => Init::Zeros,
            ParamRole::Gain => Init::Ones,
            ParamRole::Query if overrides.zero_query_init => Init::Zeros,
            ParamRole::Embedding => Init::Normal { var: 1.0 },
            ParamRole::Unembedding => {
                if mode == Parameterization::Stp || overrides.standard_unembed_init {
                    Init::Normal { var: 1.0 / m }
                } else {
                    Init::Normal { var: 1.0 / (m * m) }
                }
            }
            ParamRole::MlpOut if mode != Parameterization::Stp => Init::Normal { var: 0.25 / m },
            _ if mode == Parameterization::Stp => Init::Normal { var: 1.0 / fan_in },
            _ => Init::Normal { var: 1.0 / m },
        };
        let lr = match mode {
            Parameterization::Stp => alpha,
            Parameterization::MupRelative => match spec.role {
                ParamRole::Embedding | ParamRole::Bias | ParamRole::Gain => alpha,
                _ => alpha * p / m,
            },
            Parameterization::MupAbsolute => match spec.role {
                ParamRole::Embedding | ParamRole::Bias | ParamRole::Gain => alpha / p,
                _ => alpha / fan_in,
            },
        };
        entries.push(PlanEntry {
            name: spec.name.clone(),
            shape: spec.shape.clone(),
            role: spec.role,
            init,
            lr,
            decay_eligible: spec.shape.len() == 2,
        });
    }
    Ok(ParamPlan {
        mode,
        proxy_width,
        alpha,
        entries,
        attn_scale: cfg.attention_scale(),
        overrides,
    })
}

/// Deterministic generator for one named tensor.
fn tensor_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Draws every tensor from its plan entry. Each tensor's values depend only
/// on `(seed, tensor name)`.
pub fn init_params<T: Scalar>(params: &mut ParamSet<T>, plan: &ParamPlan, seed: u64) -> Result<()> {
    plan.check_covers(params)?;
    for (entry, tensor) in plan.entries.iter().zip(params.tensors_mut()) {
        match entry.init {
            Init::Zeros => tensor.values_mut().fill(T::ZERO),
            Init::Ones => tensor.values_mut().fill(T::ONE),
            Init::Normal { var } => {
                let std = var.sqrt();
                let mut rng = tensor_rng(seed, &entry.name);
                for v in tensor.values_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = T::narrow(z * std);
                }
            }
        }
    }
    Ok(())
}
