use crate::error::{Error, Result};
use crate::tensor::{ActivationKind, Graph, Scalar, Var};

use super::{LayerLayout, Linear, MlpActivation, MlpLayout, ModelConfig, ParamSet};

/// `batch` sequences of `seq` tokens, flattened row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    /// `false` where the target must not contribute to the loss.
    pub mask: Vec<bool>,
}

impl TokenBatch {
    pub fn new(
        batch: usize,
        seq: usize,
        inputs: Vec<usize>,
        targets: Vec<usize>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        let n = batch * seq;
        if batch == 0 || seq == 0 || inputs.len() != n || targets.len() != n || mask.len() != n {
            return Err(Error::InvalidShape {
                op: "token_batch",
                reason: format!(
                    "[{batch}, {seq}] needs {n} inputs, targets and mask entries; got {}, {}, {}",
                    inputs.len(),
                    targets.len(),
                    mask.len()
                ),
            });
        }
        Ok(TokenBatch {
            batch,
            seq,
            inputs,
            targets,
            mask,
        })
    }

    /// Next-token batch from sequences of `seq + 1` tokens, all targets valid.
    pub fn from_sequences(sequences: &[Vec<usize>]) -> Result<Self> {
        let seq = sequences.first().map_or(0, |s| s.len().saturating_sub(1));
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for s in sequences {
            if s.len() != seq + 1 {
                return Err(Error::InvalidShape {
                    op: "token_batch",
                    reason: "sequences have different lengths".into(),
                });
            }
            inputs.extend_from_slice(&s[..seq]);
            targets.extend_from_slice(&s[1..]);
        }
        let n = inputs.len();
        TokenBatch::new(sequences.len(), seq, inputs, targets, vec![true; n])
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Keep handles to intermediate activations in [`ForwardOutput::probes`].
    pub record_probes: bool,
}

pub struct ForwardOutput {
    pub loss: Var,
    pub logits: Var,
    /// `embed`, `block.{l}` (sum of the attention and MLP residual branches
    /// of layer `l`), `stream` (input to the final norm) and `logits`.
    pub probes: Vec<(String, Var)>,
}

/// Registers every tensor of `params` as a trainable leaf.
pub fn bind_params<T: Scalar>(graph: &mut Graph<T>, params: &ParamSet<T>) -> Vec<Var> {
    params
        .tensors()
        .iter()
        .map(|t| graph.param(t.clone()))
        .collect()
}

fn linear<T: Scalar>(graph: &mut Graph<T>, vars: &[Var], x: Var, l: Linear) -> Result<Var> {
    let y = graph.matmul(x, vars[l.weight])?;
    match l.bias {
        Some(b) => graph.add_bias(y, vars[b]),
        None => Ok(y),
    }
}

/// Attention residual branch for a `[B·C, M]` stream.
pub(crate) fn mha_block<T: Scalar>(
    graph: &mut Graph<T>,
    cfg: &ModelConfig,
    layer: &LayerLayout,
    vars: &[Var],
    x: Var,
    batch: usize,
    seq: usize,
) -> Result<Var> {
    let h = graph.rms_normalize(x, layer.attn_gain.map(|g| vars[g]))?;
    let q = linear(graph, vars, h, layer.query)?;
    let k = linear(graph, vars, h, layer.key)?;
    let v = linear(graph, vars, h, layer.value)?;
    let q = graph.split_heads(q, batch, seq, cfg.heads)?;
    let k = graph.split_heads(k, batch, seq, cfg.kv_heads)?;
    let v = graph.split_heads(v, batch, seq, cfg.kv_heads)?;
    let q = graph.rope(q, cfg.rope_base)?;
    let k = graph.rope(k, cfg.rope_base)?;
    let scores = graph.batched_matmul(q, k, true, cfg.attention_scale())?;
    let scores = graph.causal_mask(scores)?;
    let probs = graph.row_softmax(scores)?;
    let ctx = graph.batched_matmul(probs, v, false, 1.0)?;
    let ctx = graph.merge_heads(ctx, batch, cfg.heads)?;
    linear(graph, vars, ctx, layer.out)
}

/// MLP residual branch.
pub(crate) fn mlp_block<T: Scalar>(
    graph: &mut Graph<T>,
    cfg: &ModelConfig,
    layer: &LayerLayout,
    vars: &[Var],
    x: Var,
) -> Result<Var> {
    let h = graph.rms_normalize(x, layer.mlp_gain.map(|g| vars[g]))?;
    match layer.mlp {
        MlpLayout::Plain { fan_in, fan_out } => {
            let a = linear(graph, vars, h, fan_in)?;
            let kind = match cfg.activation {
                MlpActivation::SquaredRelu => ActivationKind::SquaredRelu,
                _ => ActivationKind::Relu,
            };
            let a = graph.activation(a, kind);
            linear(graph, vars, a, fan_out)
        }
        MlpLayout::Gated { gate, up, down } => {
            let g = linear(graph, vars, h, gate)?;
            let g = graph.activation(g, ActivationKind::Silu);
            let u = linear(graph, vars, h, up)?;
            let a = graph.mul(g, u)?;
            linear(graph, vars, a, down)
        }
    }
}

/// Builds the full forward pass on `graph` and returns the mean next-token
/// cross entropy over unmasked targets.
pub fn forward<T: Scalar>(
    graph: &mut Graph<T>,
    params: &ParamSet<T>,
    vars: &[Var],
    batch: &TokenBatch,
    options: ForwardOptions,
) -> Result<ForwardOutput> {
    let cfg = params.config();
    if vars.len() != params.len() {
        return Err(Error::InvalidModel(format!(
            "expected {} bound parameters, got {}",
            params.len(),
            vars.len()
        )));
    }
    if batch.seq > cfg.context_len {
        return Err(Error::InvalidShape {
            op: "forward",
            reason: format!(
                "sequence length {} exceeds context length {}",
                batch.seq, cfg.context_len
            ),
        });
    }
    let layout = params.layout();
    let mut probes = Vec::new();
    let mut x = graph.embedding(vars[layout.embed], &batch.inputs)?;
    if cfg.embed_norm {
        x = graph.rms_normalize(x, None)?;
    }
    if options.record_probes {
        probes.push(("embed".to_string(), x));
    }
    for (l, layer) in layout.layers.iter().enumerate() {
        let attn = mha_block(graph, cfg, layer, vars, x, batch.batch, batch.seq)?;
        let x1 = graph.add(x, attn)?;
        let mlp = mlp_block(graph, cfg, layer, vars, x1)?;
        x = graph.add(x1, mlp)?;
        if options.record_probes {
            let branch = graph.add(attn, mlp)?;
            probes.push((format!("block.{l}"), branch));
        }
    }
    if options.record_probes {
        probes.push(("stream".to_string(), x));
    }
    let y = graph.rms_normalize(x, layout.final_gain.map(|g| vars[g]))?;
    let logits = graph.matmul(y, vars[layout.unembed])?;
    if options.record_probes {
        probes.push(("logits".to_string(), logits));
    }
    let loss = graph.cross_entropy(logits, &batch.targets, &batch.mask)?;
    Ok(ForwardOutput {
        loss,
        logits,
        probes,
    })
}

/// Loss without gradients.
pub fn forward_loss<T: Scalar>(params: &ParamSet<T>, batch: &TokenBatch) -> Result<f64> {
    let mut graph = Graph::new();
    let vars: Vec<Var> = params
        .tensors()
        .iter()
        .map(|t| graph.constant(t.clone()))
        .collect();
    let out = forward(&mut graph, params, &vars, batch, ForwardOptions::default())?;
    Ok(graph.scalar(out.loss))
}
