//! Pre-norm decoder-only transformer.
//!
//! Each layer adds an attention residual and then an MLP residual computed
//! on the updated stream:
//!
//! ```text
//! X_l = X_{l-1} + MHA(X_{l-1}) + MLP(X_{l-1} + MHA(X_{l-1}))
//! ```
//!
//! Every ablation (biases, norm gains, activation, attention scale, shared
//! key/value heads, embedding normalization) is a field of [`ModelConfig`].

mod checkpoint;
mod forward;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, TensorEntry};
pub use forward::{bind_params, forward, forward_loss, ForwardOptions, ForwardOutput, TokenBatch};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DiffTensor, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlpActivation {
    Relu,
    SquaredRelu,
    Swiglu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnScaleMode {
    /// `1/D`
    Mup,
    /// `1/sqrt(D)`
    Standard,
}

impl AttnScaleMode {
    pub fn scale(self, head_dim: usize) -> f64 {
        match self {
            AttnScaleMode::Mup => 1.0 / head_dim as f64,
            AttnScaleMode::Standard => 1.0 / (head_dim as f64).sqrt(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormParams {
    None,
    Vector,
    Scalar,
}

fn one() -> f64 {
    1.0
}

fn default_rope_base() -> f64 {
    10_000.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub depth: usize,
    pub width: usize,
    pub head_dim: usize,
    pub heads: usize,
    /// Either `heads` or 1 (multi-query).
    pub kv_heads: usize,
    /// Total hidden width; for SwiGLU it is split evenly between gate and up.
    pub mlp_width: usize,
    pub activation: MlpActivation,
    pub attn_scale: AttnScaleMode,
    /// Extra constant folded into the attention scale.
    #[serde(default = "one")]
    pub attn_scale_multiplier: f64,
    pub norm_params: NormParams,
    pub biases: bool,
    pub embed_norm: bool,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
}

impl ModelConfig {
    /// Baseline: `H = M/D`, `F = 4M`, ReLU, `1/D` attention scale,
    /// nonparametric norms, no biases.
    pub fn new(
        vocab_size: usize,
        context_len: usize,
        depth: usize,
        width: usize,
        head_dim: usize,
    ) -> Self {
        let heads = (width / head_dim.max(1)).max(1);
        ModelConfig {
            vocab_size,
            context_len,
            depth,
            width,
            head_dim,
            heads,
            kv_heads: heads,
            mlp_width: 4 * width,
            activation: MlpActivation::Relu,
            attn_scale: AttnScaleMode::Mup,
            attn_scale_multiplier: 1.0,
            norm_params: NormParams::None,
            biases: false,
            embed_norm: false,
            rope_base: default_rope_base(),
        }
    }

    /// Switches activation; SwiGLU widens the MLP to `F = 5M`.
    pub fn with_activation(mut self, activation: MlpActivation) -> Self {
        self.activation = activation;
        self.mlp_width = self.default_mlp_width();
        self
    }

    /// Shares one key/value head across all query heads and widens the MLP
    /// to `F = 5M` to compensate for the removed parameters.
    pub fn with_multi_query(mut self) -> Self {
        self.kv_heads = 1;
        self.mlp_width = 5 * self.width;
        self
    }

    pub fn with_norm_params(mut self, norm_params: NormParams) -> Self {
        self.norm_params = norm_params;
        self
    }

    pub fn with_biases(mut self, biases: bool) -> Self {
        self.biases = biases;
        self
    }

    pub fn with_attn_scale(mut self, mode: AttnScaleMode) -> Self {
        self.attn_scale = mode;
        self
    }

    pub fn with_embed_norm(mut self, embed_norm: bool) -> Self {
        self.embed_norm = embed_norm;
        self
    }

    /// Architecture of the conventional baseline: trainable biases, vector
    /// norm gains and `1/sqrt(D)` attention scale.
    pub fn standard_architecture(self) -> Self {
        self.with_biases(true)
            .with_norm_params(NormParams::Vector)
            .with_attn_scale(AttnScaleMode::Standard)
    }

    /// Same architecture at a different width with the head width held fixed.
    /// The MLP keeps its ratio to the model width.
    pub fn with_width(mut self, width: usize) -> Self {
        let multi_query = self.kv_heads != self.heads;
        let ratio_num = self.mlp_width;
        let ratio_den = self.width.max(1);
        self.width = width;
        self.heads = (width / self.head_dim.max(1)).max(1);
        self.kv_heads = if multi_query { 1 } else { self.heads };
        self.mlp_width = ratio_num * width / ratio_den;
        self
    }

    fn default_mlp_width(&self) -> usize {
        if self.activation == MlpActivation::Swiglu || self.kv_heads != self.heads {
            5 * self.width
        } else {
            4 * self.width
        }
    }

    pub fn is_multi_query(&self) -> bool {
        self.kv_heads != self.heads
    }

    /// `τ⁻¹` applied to query-key scores.
    pub fn attention_scale(&self) -> f64 {
        self.attn_scale.scale(self.head_dim) * self.attn_scale_multiplier
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidModel(msg));
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("width", self.width),
            ("head_dim", self.head_dim),
            ("heads", self.heads),
            ("kv_heads", self.kv_heads),
            ("mlp_width", self.mlp_width),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.context_len < 2 {
            return fail(format!(
                "context_len must be at least 2, got {}",
                self.context_len
            ));
        }
        if self.kv_heads != self.heads && self.kv_heads != 1 {
            return fail(format!(
                "kv_heads must equal heads ({}) or 1, got {}",
                self.heads, self.kv_heads
            ));
        }
        if self.kv_heads == self.heads && self.heads * self.head_dim != self.width {
            return fail(format!(
                "heads·head_dim = {}·{} must equal width {}",
                self.heads, self.head_dim, self.width
            ));
        }
        if self.head_dim % 2 != 0 {
            return fail(format!(
                "head_dim {} must be even for rotary embeddings",
                self.head_dim
            ));
        }
        if self.activation == MlpActivation::Swiglu && self.mlp_width % 2 != 0 {
            return fail(format!(
                "swiglu needs an even mlp_width, got {}",
                self.mlp_width
            ));
        }
        if !(self.rope_base > 0.0) || !(self.attn_scale_multiplier > 0.0) {
            return fail("rope_base and attn_scale_multiplier must be positive".into());
        }
        Ok(())
    }

    fn gain_len(&self) -> Option<usize> {
        match self.norm_params {
            NormParams::None => None,
            NormParams::Vector => Some(self.width),
            NormParams::Scalar => Some(1),
        }
    }

    /// Parameters in one transformer layer, by closed form.
    pub fn layer_param_count(&self) -> usize {
        let (m, d) = (self.width, self.head_dim);
        let (hd, kvd) = (self.heads * d, self.kv_heads * d);
        let f = self.mlp_width;
        let attn = m * hd + 2 * m * kvd + hd * m;
        let mlp = match self.activation {
            MlpActivation::Swiglu => 3 * m * (f / 2),
            _ => 2 * m * f,
        };
        let biases = if self.biases {
            hd + 2 * kvd
                + m
                + match self.activation {
                    MlpActivation::Swiglu => f + m,
                    _ => f + m,
                }
        } else {
            0
        };
        let gains = 2 * self.gain_len().unwrap_or(0);
        attn + mlp + biases + gains
    }

    /// Total trainable parameters, by closed form.
    pub fn param_count(&self) -> usize {
        let embed = 2 * self.vocab_size * self.width;
        embed + self.depth * self.layer_param_count() + self.gain_len().unwrap_or(0)
    }
}

/// What a tensor does in the network; drives its init and learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Embedding,
    Query,
    Key,
    Value,
    AttnOut,
    /// Input-side MLP projection (also the SwiGLU gate and up halves).
    MlpIn,
    /// Output-side MLP projection.
    MlpOut,
    Unembedding,
    Bias,
    Gain,
}

impl ParamRole {
    /// Weight matrices other than the embedding and unembedding.
    pub fn is_hidden(self) -> bool {
        matches!(
            self,
            ParamRole::Query
                | ParamRole::Key
                | ParamRole::Value
                | ParamRole::AttnOut
                | ParamRole::MlpIn
                | ParamRole::MlpOut
        )
    }

    pub fn is_matrix(self) -> bool {
        !matches!(self, ParamRole::Bias | ParamRole::Gain)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
    /// Input width of the linear map (1 for vectors and lookup tables).
    pub fan_in: usize,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Linear {
    pub weight: usize,
    pub bias: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum MlpLayout {
    Plain { fan_in: Linear, fan_out: Linear },
    Gated { gate: Linear, up: Linear, down: Linear },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerLayout {
    pub(crate) attn_gain: Option<usize>,
    pub(crate) query: Linear,
    pub(crate) key: Linear,
    pub(crate) value: Linear,
    pub(crate) out: Linear,
    pub(crate) mlp_gain: Option<usize>,
    pub(crate) mlp: MlpLayout,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct Layout {
    pub embed: usize,
    pub layers: Vec<LayerLayout>,
    pub final_gain: Option<usize>,
    pub unembed: usize,
}

struct InventoryBuilder {
    specs: Vec<ParamSpec>,
    biases: bool,
}

impl InventoryBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, role: ParamRole, fan_in: usize) -> usize {
        self.specs.push(ParamSpec {
            name,
            shape,
            role,
            fan_in,
        });
        self.specs.len() - 1
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, role: ParamRole) -> Linear {
        let weight = self.push(
            format!("{prefix}.weight"),
            vec![fan_in, fan_out],
            role,
            fan_in,
        );
        let bias = self
            .biases
            .then(|| self.push(format!("{prefix}.bias"), vec![fan_out], ParamRole::Bias, 1));
        Linear { weight, bias }
    }

    fn gain(&mut self, name: String, len: Option<usize>) -> Option<usize> {
        len.map(|n| self.push(name, vec![n], ParamRole::Gain, 1))
    }
}

fn inventory(cfg: &ModelConfig) -> (Vec<ParamSpec>, Layout) {
    let (v, m, d) = (cfg.vocab_size, cfg.width, cfg.head_dim);
    let gain = cfg.gain_len();
    let mut b = InventoryBuilder {
        specs: Vec::new(),
        biases: cfg.biases,
    };
    let embed = b.push("embed.weight".into(), vec![v, m], ParamRole::Embedding, 1);
    let mut layers = Vec::with_capacity(cfg.depth);
    for l in 0..cfg.depth {
        let p = format!("layers.{l}");
        let attn_gain = b.gain(format!("{p}.attn_norm.gain"), gain);
        let query = b.linear(&format!("{p}.attn.query"), m, cfg.heads * d, ParamRole::Query);
        let key = b.linear(&format!("{p}.attn.key"), m, cfg.kv_heads * d, ParamRole::Key);
        let value = b.linear(&format!("{p}.attn.value"), m, cfg.kv_heads * d, ParamRole::Value);
        let out = b.linear(&format!("{p}.attn.out"), cfg.heads * d, m, ParamRole::AttnOut);
        let mlp_gain = b.gain(format!("{p}.mlp_norm.gain"), gain);
        let f = cfg.mlp_width;
        let mlp = match cfg.activation {
            MlpActivation::Swiglu => MlpLayout::Gated {
                gate: b.linear(&format!("{p}.mlp.gate"), m, f / 2, ParamRole::MlpIn),
                up: b.linear(&format!("{p}.mlp.up"), m, f / 2, ParamRole::MlpIn),
                down: b.linear(&format!("{p}.mlp.down"), f / 2, m, ParamRole::MlpOut),
            },
            _ => MlpLayout::Plain {
                fan_in: b.linear(&format!("{p}.mlp.in"), m, f, ParamRole::MlpIn),
                fan_out: b.linear(&format!("{p}.mlp.out"), f, m, ParamRole::MlpOut),
            },
        };
        layers.push(LayerLayout {
            attn_gain,
            query,
            key,
            value,
            out,
            mlp_gain,
            mlp,
        });
    }
    let final_gain = b.gain("final_norm.gain".into(), gain);
    let unembed = b.push("unembed.weight".into(), vec![m, v], ParamRole::Unembedding, m);
    (
        b.specs,
        Layout {
            embed,
            layers,
            final_gain,
            unembed,
        },
    )
}

/// Named parameter tensors of one model, in a stable order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T: Scalar = f32> {
    config: ModelConfig,
    specs: Vec<ParamSpec>,
    tensors: Vec<DiffTensor<T>>,
    layout: Layout,
}

/// Tensor inventory for `cfg` without allocating any values.
pub fn param_specs(cfg: &ModelConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    Ok(inventory(cfg).0)
}

/// Allocates the full tensor inventory for `cfg`, zero-filled.
pub fn build_model<T: Scalar>(cfg: &ModelConfig) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let (specs, layout) = inventory(cfg);
    let tensors = specs
        .iter()
        .map(|s| DiffTensor::zeros(s.shape.clone()))
        .collect();
    Ok(ParamSet {
        config: cfg.clone(),
        specs,
        tensors,
        layout,
    })
}

impl<T: Scalar> ParamSet<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn tensors(&self) -> &[DiffTensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [DiffTensor<T>] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamSpec, &DiffTensor<T>)> {
        self.specs.iter().zip(self.tensors.iter())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&DiffTensor<T>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DiffTensor<T>> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Converts every tensor to another storage type.
    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            config: self.config.clone(),
            specs: self.specs.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            layout: self.layout.clone(),
        }
    }

    /// Replaces all tensor values; shapes must match the inventory.
    pub fn set_tensors(&mut self, tensors: Vec<DiffTensor<T>>) -> Result<()> {
        if tensors.len() != self.specs.len() {
            return Err(Error::InvalidModel(format!(
                "expected {} tensors, got {}",
                self.specs.len(),
                tensors.len()
            )));
        }
        for (spec, t) in self.specs.iter().zip(&tensors) {
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "set_tensors",
                    left: spec.shape.clone(),
                    right: t.shape().to_vec(),
                });
            }
        }
        self.tensors = tensors;
        Ok(())
    }
}
