use serde::{Deserialize, Serialize};

use super::gemm::{gemm, MatRef};
use super::{DiffTensor, Scalar, RMS_EPS};
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise nonlinearities with their derivative rules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    SquaredRelu,
    Silu,
}

impl ActivationKind {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            ActivationKind::Relu => x.max(0.0),
            ActivationKind::SquaredRelu => {
                let r = x.max(0.0);
                r * r
            }
            ActivationKind::Silu => x * sigmoid(x),
        }
    }

    /// Derivative; the kinks of relu and squared relu take the value 0 at 0.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            ActivationKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::SquaredRelu => 2.0 * x.max(0.0),
            ActivationKind::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    BatchedMatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
        alpha: f64,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    RmsNorm {
        x: Var,
        gain: Option<Var>,
        inv_rms: Vec<f64>,
    },
    Activation {
        x: Var,
        kind: ActivationKind,
    },
    Softmax {
        x: Var,
    },
    CausalMask {
        x: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SplitHeads {
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        batch: usize,
        heads: usize,
    },
    Rope {
        x: Var,
        cos: Vec<f64>,
        sin: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
    Sum {
        x: Var,
    },
}

struct Node<T: Scalar> {
    tensor: DiffTensor<T>,
    op: Op,
}

/// Reverse-mode tape. Nodes are appended in evaluation order.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf, keeping the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, tensor: DiffTensor<T>) -> Var {
        self.nodes.push(Node {
            tensor,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, tensor: DiffTensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: DiffTensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &DiffTensor<T> {
        &self.nodes[v.0].tensor
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].tensor.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].tensor.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].tensor.take_grad()
    }

    /// Scalar value of a one-element tensor.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].tensor.values()[0].widen()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].tensor.requires_grad()
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<T>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let tensor = DiffTensor {
            shape,
            values,
            requires_grad,
            grad: None,
        };
        self.nodes.push(Node { tensor, op });
        Var(self.nodes.len() - 1)
    }

    fn widen(&self, v: Var) -> std::borrow::Cow<'_, [f64]> {
        T::widen_slice(self.nodes[v.0].tensor.values())
    }

    /// `a [.., m, k] × b [k, n] -> [.., m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let (k, n) = (sb[0], sb[1]);
        let rows = self.value(a).len() / k;
        let mut out = vec![0.0; rows * n];
        {
            let aw = self.widen(a);
            let bw = self.widen(b);
            gemm(
                1.0,
                MatRef::row_major(&aw, rows, k),
                MatRef::row_major(&bw, k, n),
                &mut out,
            );
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, narrow_vec(&out), Op::MatMul { a, b }, rg))
    }

    /// Grouped product `alpha · a[g] × b[g / r]` where `r = Ga / Gb`.
    ///
    /// `a` is `[Ga, m, k]`; `b` is `[Gb, k, n]`, or `[Gb, n, k]` when
    /// `transpose_b` is set. Several `a` groups may share one `b` group,
    /// which is how shared key/value heads are expressed.
    pub fn batched_matmul(&mut self, a: Var, b: Var, transpose_b: bool, alpha: f64) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::ShapeMismatch {
            op: "batched_matmul",
            left: sa.clone(),
            right: sb.clone(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] % sb[0] != 0 {
            return Err(mismatch());
        }
        let (ga, m, k) = (sa[0], sa[1], sa[2]);
        let (gb, bk, n) = if transpose_b {
            (sb[0], sb[2], sb[1])
        } else {
            (sb[0], sb[1], sb[2])
        };
        if bk != k {
            return Err(mismatch());
        }
        let ratio = ga / gb;
        let mut out = vec![0.0; ga * m * n];
        {
            let aw = self.widen(a);
            let bw = self.widen(b);
            for g in 0..ga {
                let a_g = &aw[g * m * k..(g + 1) * m * k];
                let b_g = &bw[(g / ratio) * k * n..(g / ratio + 1) * k * n];
                let b_view = if transpose_b {
                    MatRef::transposed(b_g, n, k)
                } else {
                    MatRef::row_major(b_g, k, n)
                };
                gemm(
                    alpha,
                    MatRef::row_major(a_g, m, k),
                    b_view,
                    &mut out[g * m * n..(g + 1) * m * n],
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            vec![ga, m, n],
            narrow_vec(&out),
            Op::BatchedMatMul {
                a,
                b,
                transpose_b,
                alpha,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let values = zip_values(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), values, Op::Add { a, b }, rg))
    }

    /// Adds a `[n]` vector to every row of `x [.., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(bias) != [n] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: self.shape(x).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).values();
        let values: Vec<T> = self
            .value(x)
            .values()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &c)| v + c))
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(self.shape(x).to_vec(), values, Op::AddBias { x, bias }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let values = zip_values(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), values, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let values = self
            .value(x)
            .values()
            .iter()
            .map(|v| T::narrow(v.widen() * factor))
            .collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), values, Op::Scale { x, factor }, rg)
    }

    /// Divides each row by its root mean square, then applies an optional
    /// gain that is either a length-`M` vector or a single scalar.
    pub fn rms_normalize(&mut self, x: Var, gain: Option<Var>) -> Result<Var> {
        let width = self.value(x).last_dim();
        if let Some(g) = gain {
            let gs = self.shape(g);
            if gs != [width] && gs != [1] {
                return Err(Error::InvalidShape {
                    op: "rms_normalize",
                    reason: format!(
                        "gain must be absent, [{width}] or [1]; got {:?}",
                        gs.to_vec()
                    ),
                });
            }
        }
        let xs = self.widen(x);
        let gains: Option<Vec<f64>> = gain.map(|g| self.widen(g).into_owned());
        let rows = xs.len() / width;
        let mut inv_rms = Vec::with_capacity(rows);
        let mut values = Vec::with_capacity(xs.len());
        for row in xs.chunks(width) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / width as f64;
            let r = 1.0 / (ms + RMS_EPS).sqrt();
            inv_rms.push(r);
            match &gains {
                None => values.extend(row.iter().map(|v| T::narrow(v * r))),
                Some(g) if g.len() == 1 => {
                    values.extend(row.iter().map(|v| T::narrow(v * r * g[0])))
                }
                Some(g) => values.extend(
                    row.iter()
                        .zip(g.iter())
                        .map(|(v, gi)| T::narrow(v * r * gi)),
                ),
            }
        }
        drop(xs);
        let rg = self.rg(x) || gain.is_some_and(|g| self.rg(g));
        Ok(self.push(
            self.shape(x).to_vec(),
            values,
            Op::RmsNorm { x, gain, inv_rms },
            rg,
        ))
    }

    pub fn activation(&mut self, x: Var, kind: ActivationKind) -> Var {
        let values = self
            .value(x)
            .values()
            .iter()
            .map(|v| T::narrow(kind.apply(v.widen())))
            .collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), values, Op::Activation { x, kind }, rg)
    }

    /// Softmax along the last axis. Entries equal to `-inf` act as a mask
    /// and receive exactly zero probability.
    pub fn row_softmax(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        let xs = self.widen(x);
        let mut values = Vec::with_capacity(xs.len());
        let mut scratch = vec![0.0; n];
        for (r, row) in xs.chunks(n).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateMask { row: r });
            }
            let mut denom = 0.0;
            for (s, &v) in scratch.iter_mut().zip(row) {
                *s = (v - max).exp();
                denom += *s;
            }
            values.extend(scratch.iter().map(|&s| T::narrow(s / denom)));
        }
        drop(xs);
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), values, Op::Softmax { x }, rg))
    }

    /// Sets entries above the diagonal of each trailing `[C, C]` block to `-inf`.
    pub fn causal_mask(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 || shape[r - 1] != shape[r - 2] {
            return Err(Error::InvalidShape {
                op: "causal_mask",
                reason: format!("trailing axes must be square, got {shape:?}"),
            });
        }
        let c = shape[r - 1];
        let mut values = self.value(x).values().to_vec();
        let neg_inf = T::narrow(f64::NEG_INFINITY);
        for block in values.chunks_mut(c * c) {
            for i in 0..c {
                for v in &mut block[i * c + i + 1..(i + 1) * c] {
                    *v = neg_inf;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, values, Op::CausalMask { x }, rg))
    }

    /// Gathers rows of `table [V, M]` for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::InvalidShape {
                op: "embedding",
                reason: format!("table must be 2-D, got {shape:?}"),
            });
        }
        let (vocab, width) = (shape[0], shape[1]);
        if ids.is_empty() {
            return Err(Error::InvalidShape {
                op: "embedding",
                reason: "no ids".into(),
            });
        }
        let src = self.value(table).values();
        let mut values = Vec::with_capacity(ids.len() * width);
        for (position, &id) in ids.iter().enumerate() {
            if id >= vocab {
                return Err(Error::TargetOutOfRange {
                    target: id,
                    position,
                    vocab,
                });
            }
            values.extend_from_slice(&src[id * width..(id + 1) * width]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![ids.len(), width],
            values,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// `[batch·seq, heads·D] -> [batch·heads, seq, D]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != batch * seq || shape[1] % heads != 0 {
            return Err(Error::InvalidShape {
                op: "split_heads",
                reason: format!("{shape:?} is not [{batch}·{seq}, {heads}·D]"),
            });
        }
        let d = shape[1] / heads;
        let src = self.value(x).values();
        let mut values = Vec::with_capacity(src.len());
        for b in 0..batch {
            for h in 0..heads {
                for s in 0..seq {
                    let row = (b * seq + s) * heads * d + h * d;
                    values.extend_from_slice(&src[row..row + d]);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            vec![batch * heads, seq, d],
            values,
            Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
            },
            rg,
        ))
    }

    /// `[batch·heads, seq, D] -> [batch·seq, heads·D]`.
    pub fn merge_heads(&mut self, x: Var, batch: usize, heads: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || shape[0] != batch * heads {
            return Err(Error::InvalidShape {
                op: "merge_heads",
                reason: format!("{shape:?} is not [{batch}·{heads}, C, D]"),
            });
        }
        let (seq, d) = (shape[1], shape[2]);
        let src = self.value(x).values();
        let mut values = vec![T::ZERO; src.len()];
        for b in 0..batch {
            for h in 0..heads {
                for s in 0..seq {
                    let from = ((b * heads + h) * seq + s) * d;
                    let to = (b * seq + s) * heads * d + h * d;
                    values[to..to + d].copy_from_slice(&src[from..from + d]);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            vec![batch * seq, heads * d],
            values,
            Op::MergeHeads { x, batch, heads },
            rg,
        ))
    }

    /// Rotary position embedding on `[.., C, D]`: the pair `(2i, 2i+1)` at
    /// row `pos` is rotated by `pos · base^(-2i/D)`.
    pub fn rope(&mut self, x: Var, base: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::InvalidShape {
                op: "rope",
                reason: format!("expected [.., C, D], got {shape:?}"),
            });
        }
        let (seq, d) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if d % 2 != 0 {
            return Err(Error::InvalidShape {
                op: "rope",
                reason: format!("head width {d} is odd"),
            });
        }
        let half = d / 2;
        let mut cos = Vec::with_capacity(seq * half);
        let mut sin = Vec::with_capacity(seq * half);
        for pos in 0..seq {
            for i in 0..half {
                let angle = pos as f64 * base.powf(-2.0 * i as f64 / d as f64);
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        let xs = self.widen(x);
        let mut values = Vec::with_capacity(xs.len());
        for (r, row) in xs.chunks(d).enumerate() {
            let pos = r % seq;
            for i in 0..half {
                let (c, s) = (cos[pos * half + i], sin[pos * half + i]);
                let (x0, x1) = (row[2 * i], row[2 * i + 1]);
                values.push(T::narrow(x0 * c - x1 * s));
                values.push(T::narrow(x0 * s + x1 * c));
            }
        }
        drop(xs);
        let rg = self.rg(x);
        Ok(self.push(shape, values, Op::Rope { x, cos, sin }, rg))
    }

    /// Mean over valid rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() || mask.len() != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: shape,
                right: vec![targets.len(), mask.len()],
            });
        }
        let vocab = shape[1];
        if let Some((position, &target)) = targets.iter().enumerate().find(|(_, &t)| t >= vocab) {
            return Err(Error::TargetOutOfRange {
                target,
                position,
                vocab,
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::NoValidTargets);
        }
        let xs = self.widen(logits);
        let mut probs = vec![0.0; xs.len()];
        let mut total = 0.0;
        for (i, row) in xs.chunks(vocab).enumerate() {
            if !mask[i] {
                continue;
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + denom.ln();
            total += lse - row[targets[i]];
            for (p, &v) in probs[i * vocab..(i + 1) * vocab].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        drop(xs);
        let loss = total / count as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![T::narrow(loss)],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).values().iter().map(|v| v.widen()).sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![T::narrow(total)], Op::Sum { x }, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// Populates gradients of every `requires_grad` node reachable from `loss`.
    ///
    /// A graph supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardAlreadyRun);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        if !self.rg(loss) {
            return Ok(());
        }
        let mut pending: Vec<Option<Vec<f64>>> = Vec::new();
        pending.resize_with(loss.0 + 1, || None);
        pending[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(grad) = pending[idx].take() else {
                continue;
            };
            for (target, contribution) in self.propagate(idx, &grad) {
                match &mut pending[target.0] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contribution),
                }
            }
            self.nodes[idx].tensor.grad = Some(narrow_vec(&grad));
        }
        Ok(())
    }

    /// Gradient contributions from node `idx` to its inputs.
    fn propagate(&self, idx: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (k, n) = {
                    let s = self.shape(*b);
                    (s[0], s[1])
                };
                let rows = self.value(*a).len() / k;
                if self.rg(*a) {
                    let bw = self.widen(*b);
                    let mut da = vec![0.0; rows * k];
                    gemm(
                        1.0,
                        MatRef::row_major(g, rows, n),
                        MatRef::transposed(&bw, k, n),
                        &mut da,
                    );
                    out.push((*a, da));
                }
                if self.rg(*b) {
                    let aw = self.widen(*a);
                    let mut db = vec![0.0; k * n];
                    gemm(
                        1.0,
                        MatRef::transposed(&aw, rows, k),
                        MatRef::row_major(g, rows, n),
                        &mut db,
                    );
                    out.push((*b, db));
                }
            }
            Op::BatchedMatMul {
                a,
                b,
                transpose_b,
                alpha,
            } => {
                let sa = self.shape(*a);
                let (ga, m, k) = (sa[0], sa[1], sa[2]);
                let gb = self.shape(*b)[0];
                let n = node.tensor.last_dim();
                let ratio = ga / gb;
                let aw = self.widen(*a);
                let bw = self.widen(*b);
                if self.rg(*a) {
                    let mut da = vec![0.0; ga * m * k];
                    for grp in 0..ga {
                        let b_g = &bw[(grp / ratio) * k * n..(grp / ratio + 1) * k * n];
                        // b_g^T as an n×k view
                        let bt = if *transpose_b {
                            MatRef::row_major(b_g, n, k)
                        } else {
                            MatRef::transposed(b_g, k, n)
                        };
                        gemm(
                            *alpha,
                            MatRef::row_major(&g[grp * m * n..(grp + 1) * m * n], m, n),
                            bt,
                            &mut da[grp * m * k..(grp + 1) * m * k],
                        );
                    }
                    out.push((*a, da));
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; gb * k * n];
                    let mut scratch = vec![0.0; k * n];
                    for grp in 0..ga {
                        let a_g = &aw[grp * m * k..(grp + 1) * m * k];
                        let g_g = &g[grp * m * n..(grp + 1) * m * n];
                        if *transpose_b {
                            gemm(
                                *alpha,
                                MatRef::transposed(g_g, m, n),
                                MatRef::row_major(a_g, m, k),
                                &mut scratch,
                            );
                        } else {
                            gemm(
                                *alpha,
                                MatRef::transposed(a_g, m, k),
                                MatRef::row_major(g_g, m, n),
                                &mut scratch,
                            );
                        }
                        let dst = &mut db[(grp / ratio) * k * n..(grp / ratio + 1) * k * n];
                        dst.iter_mut().zip(&scratch).for_each(|(d, s)| *d += s);
                    }
                    out.push((*b, db));
                }
            }
            Op::Add { a, b } => {
                if self.rg(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.rg(*b) {
                    out.push((*b, g.to_vec()));
                }
            }
            Op::AddBias { x, bias } => {
                if self.rg(*x) {
                    out.push((*x, g.to_vec()));
                }
                if self.rg(*bias) {
                    let n = self.value(*bias).len();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    out.push((*bias, db));
                }
            }
            Op::Mul { a, b } => {
                if self.rg(*a) {
                    let bw = self.widen(*b);
                    out.push((*a, g.iter().zip(bw.iter()).map(|(g, b)| g * b).collect()));
                }
                if self.rg(*b) {
                    let aw = self.widen(*a);
                    out.push((*b, g.iter().zip(aw.iter()).map(|(g, a)| g * a).collect()));
                }
            }
            Op::Scale { x, factor } => {
                if self.rg(*x) {
                    out.push((*x, g.iter().map(|v| v * factor).collect()));
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let width = node.tensor.last_dim();
                let xs = self.widen(*x);
                let gains = gain.map(|gv| self.widen(gv).into_owned());
                let gain_at = |i: usize| match &gains {
                    None => 1.0,
                    Some(gs) if gs.len() == 1 => gs[0],
                    Some(gs) => gs[i],
                };
                if self.rg(*x) {
                    let mut dx = vec![0.0; xs.len()];
                    for (r, ((xr, gr), dr)) in xs
                        .chunks(width)
                        .zip(g.chunks(width))
                        .zip(dx.chunks_mut(width))
                        .enumerate()
                    {
                        let inv = inv_rms[r];
                        let dot: f64 = (0..width).map(|i| gr[i] * gain_at(i) * xr[i]).sum();
                        let coef = inv * inv * inv * dot / width as f64;
                        for i in 0..width {
                            dr[i] = inv * gr[i] * gain_at(i) - coef * xr[i];
                        }
                    }
                    out.push((*x, dx));
                }
                if let Some(gv) = gain {
                    if self.rg(*gv) {
                        let glen = self.value(*gv).len();
                        let mut dg = vec![0.0; glen];
                        for (r, (xr, gr)) in xs.chunks(width).zip(g.chunks(width)).enumerate() {
                            let inv = inv_rms[r];
                            for i in 0..width {
                                dg[if glen == 1 { 0 } else { i }] += gr[i] * xr[i] * inv;
                            }
                        }
                        out.push((*gv, dg));
                    }
                }
            }
            Op::Activation { x, kind } => {
                if self.rg(*x) {
                    let xs = self.widen(*x);
                    out.push((
                        *x,
                        g.iter()
                            .zip(xs.iter())
                            .map(|(g, &v)| g * kind.derivative(v))
                            .collect(),
                    ));
                }
            }
            Op::Softmax { x } => {
                if self.rg(*x) {
                    let n = node.tensor.last_dim();
                    let ys = T::widen_slice(node.tensor.values());
                    let mut dx = vec![0.0; ys.len()];
                    for ((yr, gr), dr) in ys.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for i in 0..n {
                            dr[i] = yr[i] * (gr[i] - dot);
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::CausalMask { x } => {
                if self.rg(*x) {
                    let c = node.tensor.last_dim();
                    let mut dx = g.to_vec();
                    for block in dx.chunks_mut(c * c) {
                        for i in 0..c {
                            for v in &mut block[i * c + i + 1..(i + 1) * c] {
                                *v = 0.0;
                            }
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::Embedding { table, ids } => {
                if self.rg(*table) {
                    let width = node.tensor.last_dim();
                    let mut dt = vec![0.0; self.value(*table).len()];
                    for (row, &id) in ids.iter().enumerate() {
                        let dst = &mut dt[id * width..(id + 1) * width];
                        let src = &g[row * width..(row + 1) * width];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                    out.push((*table, dt));
                }
            }
            Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
            } => {
                if self.rg(*x) {
                    let d = node.tensor.last_dim();
                    let mut dx = vec![0.0; g.len()];
                    for b in 0..*batch {
                        for h in 0..*heads {
                            for s in 0..*seq {
                                let from = ((b * heads + h) * seq + s) * d;
                                let to = (b * seq + s) * heads * d + h * d;
                                dx[to..to + d].copy_from_slice(&g[from..from + d]);
                            }
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::MergeHeads { x, batch, heads } => {
                if self.rg(*x) {
                    let s = self.shape(*x);
                    let (seq, d) = (s[1], s[2]);
                    let mut dx = vec![0.0; g.len()];
                    for b in 0..*batch {
                        for h in 0..*heads {
                            for s in 0..seq {
                                let to = ((b * heads + h) * seq + s) * d;
                                let from = (b * seq + s) * heads * d + h * d;
                                dx[to..to + d].copy_from_slice(&g[from..from + d]);
                            }
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::Rope { x, cos, sin } => {
                if self.rg(*x) {
                    let s = self.shape(*x);
                    let (seq, d) = (s[s.len() - 2], s[s.len() - 1]);
                    let half = d / 2;
                    let mut dx = vec![0.0; g.len()];
                    for (r, (gr, dr)) in g.chunks(d).zip(dx.chunks_mut(d)).enumerate() {
                        let pos = r % seq;
                        for i in 0..half {
                            let (c, s) = (cos[pos * half + i], sin[pos * half + i]);
                            let (g0, g1) = (gr[2 * i], gr[2 * i + 1]);
                            dr[2 * i] = g0 * c + g1 * s;
                            dr[2 * i + 1] = -g0 * s + g1 * c;
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                if self.rg(*logits) {
                    let vocab = self.value(*logits).last_dim();
                    let scale = g[0] / *count as f64;
                    let mut dl = vec![0.0; probs.len()];
                    for (i, (pr, dr)) in probs.chunks(vocab).zip(dl.chunks_mut(vocab)).enumerate() {
                        if !mask[i] {
                            continue;
                        }
                        for j in 0..vocab {
                            dr[j] = pr[j] * scale;
                        }
                        dr[targets[i]] -= scale;
                    }
                    out.push((*logits, dl));
                }
            }
            Op::Sum { x } => {
                if self.rg(*x) {
                    out.push((*x, vec![g[0]; self.value(*x).len()]));
                }
            }
        }
        out
    }
}

fn narrow_vec<T: Scalar>(xs: &[f64]) -> Vec<T> {
    xs.iter().map(|&x| T::narrow(x)).collect()
}

fn zip_values<T: Scalar>(a: &DiffTensor<T>, b: &DiffTensor<T>, f: impl Fn(T, T) -> T) -> Vec<T> {
    a.values()
        .iter()
        .zip(b.values())
        .map(|(&x, &y)| f(x, y))
        .collect()
}
