//! Tape-based reverse-mode automatic differentiation.
//!
//! Forward operations append nodes to a [`Tape`] in topological order;
//! [`Tape::backward`] replays them once in reverse. Values are dense f64
//! tensors; each op stores whatever it needs for its local gradient.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Add { a: usize, b: usize },
    AddBias { a: usize, b: usize },
    Sub { a: usize, b: usize },
    MulElem { a: usize, b: usize },
    DivElem { a: usize, b: usize },
    Scale { a: usize, k: f64 },
    AddScalar { a: usize },
    Neg { a: usize },
    Sum { a: usize },
    Mean { a: usize },
    Softmax { a: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu { a: usize },
    Tanh { a: usize },
    Sigmoid { a: usize },
    Sqrt { a: usize },
    Dropout { a: usize, mask: Vec<bool>, keep: f64 },
    Transpose { a: usize },
    ConcatRows { parts: Vec<usize> },
    SliceRows { a: usize, start: usize },
    ConcatCols { parts: Vec<usize> },
    SliceCols { a: usize, start: usize },
    EmbedRows { table: usize, indices: Vec<usize> },
    MaxRows { a: usize, argmax: Vec<usize> },
    MeanRows { a: usize },
    Rodrigues { v: usize },
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::AddBias { .. } => "add_bias",
            Op::Sub { .. } => "sub",
            Op::MulElem { .. } => "mul",
            Op::DivElem { .. } => "div",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Neg { .. } => "neg",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu { .. } => "gelu",
            Op::Tanh { .. } => "tanh",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Sqrt { .. } => "sqrt",
            Op::Dropout { .. } => "dropout",
            Op::Transpose { .. } => "transpose",
            Op::ConcatRows { .. } => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatCols { .. } => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::EmbedRows { .. } => "embed_rows",
            Op::MaxRows { .. } => "max_rows",
            Op::MeanRows { .. } => "mean_rows",
            Op::Rodrigues { .. } => "rodrigues",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    /// Index into the owning `ParamStore`, for parameter leaves.
    param: Option<usize>,
}

/// Recorded forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    node_grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, if `v` was reached.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.node_grads[v.0].as_deref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        debug_assert!(value.all_finite(), "non-finite value out of `{}`", op.name());
        self.nodes.push(Node { op, value, param: None });
        Var(self.nodes.len() - 1)
    }

    /// Record a differentiable leaf (inputs the caller wants gradients for).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t.with_grad())
    }

    /// Record a non-differentiable constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.requires_grad = false;
        self.push(Op::Leaf, t)
    }

    pub(crate) fn param_leaf(&mut self, t: Tensor, param_index: usize) -> Var {
        let v = self.push(Op::Leaf, t.with_grad());
        self.nodes[v.0].param = Some(param_index);
        v
    }

    // ---- arithmetic ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, ka) = self.value(a).shape_2d();
        let (kb, n) = self.value(b).shape_2d();
        assert_eq!(ka, kb, "matmul inner dims {ka} vs {kb}");
        let out = crate::linalg::matmul(&self.value(a).data, &self.value(b).data, m, ka, n);
        self.push(Op::Matmul { a: a.0, b: b.0 }, Tensor::new(vec![m, n], out).unwrap())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).numel(), self.value(b).numel(), "add shape mismatch");
        let data: Vec<f64> = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape.clone();
        self.push(Op::Add { a: a.0, b: b.0 }, Tensor::new(shape, data).unwrap())
    }

    /// `a` is `[r, c]`, `bias` is length `c`; the bias is added to each row.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (r, c) = self.value(a).shape_2d();
        assert_eq!(self.value(bias).numel(), c, "bias length mismatch");
        let mut data = self.value(a).data.clone();
        let b = &self.value(bias).data;
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += b[j];
            }
        }
        let shape = self.value(a).shape.clone();
        self.push(Op::AddBias { a: a.0, b: bias.0 }, Tensor::new(shape, data).unwrap())
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).numel(), self.value(b).numel(), "sub shape mismatch");
        let data: Vec<f64> = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape.clone();
        self.push(Op::Sub { a: a.0, b: b.0 }, Tensor::new(shape, data).unwrap())
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).numel(), self.value(b).numel(), "mul shape mismatch");
        let data: Vec<f64> = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape.clone();
        self.push(Op::MulElem { a: a.0, b: b.0 }, Tensor::new(shape, data).unwrap())
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).numel(), self.value(b).numel(), "div shape mismatch");
        let data: Vec<f64> = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x / y)
            .collect();
        let shape = self.value(a).shape.clone();
        self.push(Op::DivElem { a: a.0, b: b.0 }, Tensor::new(shape, data).unwrap())
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let data: Vec<f64> = self.value(a).data.iter().map(|x| x * k).collect();
        let shape = self.value(a).shape.clone();
        self.push(Op::Scale { a: a.0, k }, Tensor::new(shape, data).unwrap())
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let data: Vec<f64> = self.value(a).data.iter().map(|x| x + k).collect();
        let shape = self.value(a).shape.clone();
        self.push(Op::AddScalar { a: a.0 }, Tensor::new(shape, data).unwrap())
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.value(a).data.iter().map(|x| -x).collect();
        let shape = self.value(a).shape.clone();
        self.push(Op::Neg { a: a.0 }, Tensor::new(shape, data).unwrap())
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data.iter().sum();
        self.push(Op::Sum { a: a.0 }, Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s: f64 = self.value(a).data.iter().sum();
        self.push(Op::Mean { a: a.0 }, Tensor::scalar(s / n))
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.value(a).shape_2d();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.value(a).data[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                data[i * c + j] = e;
                z += e;
            }
            for j in 0..c {
                data[i * c + j] /= z;
            }
        }
        let shape = self.value(a).shape.clone();
        self.push(Op::Softmax { a: a.0 }, Tensor::new(shape, data).unwrap())
    }

    /// Row-wise layer normalization with affine gain/bias over the last dim.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let (r, c) = self.value(x).shape_2d();
        assert_eq!(self.value(gain).numel(), c, "layer_norm gain length");
        assert_eq!(self.value(bias).numel(), c, "layer_norm bias length");
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        {
            let xv = &self.value(x).data;
            let g = &self.value(gain).data;
            let b = &self.value(bias).data;
            for i in 0..r {
                let row = &xv[i * c..(i + 1) * c];
                let mu = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[i] = is;
                for j in 0..c {
                    let xh = (row[j] - mu) * is;
                    xhat[i * c + j] = xh;
                    out[i * c + j] = xh * g[j] + b[j];
                }
            }
        }
        let shape = self.value(x).shape.clone();
        self.push(
            Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, xhat, inv_std },
            Tensor::new(shape, out).unwrap(),
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.value(a).data.iter().map(|&x| gelu_fwd(x)).collect();
        let shape = self.value(a).shape.clone();
        self.push(Op::Gelu { a: a.0 }, Tensor::new(shape, data).unwrap())
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.value(a).data.iter().map(|x| x.tanh()).collect();
        let shape = self.value(a).shape.clone();
        self.push(Op::Tanh { a: a.0 }, Tensor::new(shape, data).unwrap())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self
            .value(a)
            .data
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let shape = self.value(a).shape.clone();
        self.push(Op::Sigmoid { a: a.0 }, Tensor::new(shape, data).unwrap())
    }

    /// Element-wise square root. Inputs must be strictly positive where a
    /// gradient is needed.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.value(a).data.iter().map(|x| x.sqrt()).collect();
        let shape = self.value(a).shape.clone();
        self.push(Op::Sqrt { a: a.0 }, Tensor::new(shape, data).unwrap())
    }

    /// Inverted dropout with a seeded mask; identity when `rate == 0`.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut ChaCha8Rng) -> Var {
        assert!((0.0..1.0).contains(&rate), "dropout rate in [0,1)");
        if rate == 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let mask: Vec<bool> = (0..self.value(a).numel())
            .map(|_| rng.random::<f64>() >= rate)
            .collect();
        let data: Vec<f64> = self
            .value(a)
            .data
            .iter()
            .zip(&mask)
            .map(|(x, &m)| if m { x / keep } else { 0.0 })
            .collect();
        let shape = self.value(a).shape.clone();
        self.push(Op::Dropout { a: a.0, mask, keep }, Tensor::new(shape, data).unwrap())
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.value(a).shape_2d();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.value(a).data[i * c + j];
            }
        }
        self.push(Op::Transpose { a: a.0 }, Tensor::new(vec![c, r], data).unwrap())
    }

    /// Stack 2-D blocks with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (_, c) = self.value(parts[0]).shape_2d();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.value(p).shape_2d();
            assert_eq!(pc, c, "concat_rows column mismatch");
            rows += r;
            data.extend_from_slice(&self.value(p).data);
        }
        self.push(
            Op::ConcatRows { parts: parts.iter().map(|v| v.0).collect() },
            Tensor::new(vec![rows, c], data).unwrap(),
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.value(a).shape_2d();
        assert!(start + len <= r, "slice_rows out of range");
        let data = self.value(a).data[start * c..(start + len) * c].to_vec();
        self.push(Op::SliceRows { a: a.0, start }, Tensor::new(vec![len, c], data).unwrap())
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (r, _) = self.value(parts[0]).shape_2d();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (pr, pc) = self.value(p).shape_2d();
                assert_eq!(pr, r, "concat_cols row mismatch");
                pc
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; r * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            for i in 0..r {
                data[i * total + off..i * total + off + w]
                    .copy_from_slice(&self.value(p).data[i * w..(i + 1) * w]);
            }
            off += w;
        }
        self.push(
            Op::ConcatCols { parts: parts.iter().map(|v| v.0).collect() },
            Tensor::new(vec![r, total], data).unwrap(),
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.value(a).shape_2d();
        assert!(start + len <= c, "slice_cols out of range");
        let mut data = vec![0.0; r * len];
        for i in 0..r {
            data[i * len..(i + 1) * len]
                .copy_from_slice(&self.value(a).data[i * c + start..i * c + start + len]);
        }
        self.push(Op::SliceCols { a: a.0, start }, Tensor::new(vec![r, len], data).unwrap())
    }

    /// Gather rows of an embedding table; grads scatter-add back.
    pub fn embed_rows(&mut self, table: Var, indices: &[usize]) -> Var {
        let (r, c) = self.value(table).shape_2d();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            assert!(i < r, "embedding index out of range");
            data.extend_from_slice(&self.value(table).data[i * c..(i + 1) * c]);
        }
        self.push(
            Op::EmbedRows { table: table.0, indices: indices.to_vec() },
            Tensor::new(vec![indices.len(), c], data).unwrap(),
        )
    }

    /// Column-wise max over rows, yielding `[1, c]`.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.value(a).shape_2d();
        assert!(r > 0);
        let mut argmax = vec![0usize; c];
        let mut data = vec![f64::NEG_INFINITY; c];
        for i in 0..r {
            for j in 0..c {
                let v = self.value(a).data[i * c + j];
                if v > data[j] {
                    data[j] = v;
                    argmax[j] = i;
                }
            }
        }
        self.push(Op::MaxRows { a: a.0, argmax }, Tensor::new(vec![1, c], data).unwrap())
    }

    /// Column-wise mean over rows, yielding `[1, c]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.value(a).shape_2d();
        assert!(r > 0);
        let mut data = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                data[j] += self.value(a).data[i * c + j];
            }
        }
        for j in 0..c {
            data[j] /= r as f64;
        }
        self.push(Op::MeanRows { a: a.0 }, Tensor::new(vec![1, c], data).unwrap())
    }

    /// Rotation matrix (row-major `[3,3]`) from an axis-angle 3-vector.
    pub fn rodrigues(&mut self, v: Var) -> Var {
        assert_eq!(self.value(v).numel(), 3, "rodrigues wants a 3-vector");
        let r = rodrigues_fwd(&self.value(v).data);
        self.push(Op::Rodrigues { v: v.0 }, Tensor::new(vec![3, 3], r.to_vec()).unwrap())
    }

    /// Mean cross-entropy of row-wise logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let (r, c) = self.value(logits).shape_2d();
        assert_eq!(r, labels.len(), "one label per logit row");
        let mut probs = vec![0.0; r * c];
        let mut loss = 0.0;
        for i in 0..r {
            let row = &self.value(logits).data[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                probs[i * c + j] = e;
                z += e;
            }
            for j in 0..c {
                probs[i * c + j] /= z;
            }
            assert!(labels[i] < c, "label out of range");
            loss -= probs[i * c + labels[i]].max(1e-300).ln();
        }
        loss /= r as f64;
        self.push(
            Op::CrossEntropy { logits: logits.0, labels: labels.to_vec(), probs },
            Tensor::scalar(loss),
        )
    }

    // ---- composite helpers ----

    /// Sum of squared entries as a scalar.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let sq = self.mul(a, a);
        self.sum(sq)
    }

    /// Mean squared error between two same-shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean(sq)
    }

    // ---- backward ----

    /// Reverse pass from a scalar loss. Returns per-node gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::numeric(
                    self.nodes[idx].op.name(),
                    "non-finite gradient",
                ));
            }
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { node_grads: grads })
    }

    /// Accumulate parameter gradients (zero for unreached parameters)
    /// into `acc`, aligned with parameter indices.
    pub fn accumulate_param_grads(&self, grads: &Gradients, acc: &mut [Vec<f64>]) {
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Some(p) = node.param {
                if let Some(g) = &grads.node_grads[idx] {
                    let slot = &mut acc[p];
                    for (s, v) in slot.iter_mut().zip(g.iter()) {
                        *s += v;
                    }
                }
            }
        }
    }

    fn want_grad(&self, idx: usize) -> bool {
        self.nodes[idx].value.requires_grad || !matches!(self.nodes[idx].op, Op::Leaf)
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], idx: usize, contrib: impl FnOnce(&mut [f64])) {
        if !self.want_grad(idx) {
            return;
        }
        let n = self.nodes[idx].value.numel();
        let slot = grads[idx].get_or_insert_with(|| vec![0.0; n]);
        contrib(slot);
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = self.nodes[*a].value.shape_2d();
                let (_, n) = self.nodes[*b].value.shape_2d();
                let av = &self.nodes[*a].value.data;
                let bv = &self.nodes[*b].value.data;
                self.accum(grads, *a, |ga| {
                    // ga += g @ b^T
                    for i in 0..m {
                        for l in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv[l * n + j];
                            }
                            ga[i * k + l] += s;
                        }
                    }
                });
                self.accum(grads, *b, |gb| {
                    // gb += a^T @ g
                    for l in 0..k {
                        for i in 0..m {
                            let asc = av[i * k + l];
                            if asc == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[l * n + j] += asc * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                self.accum(grads, *a, |ga| {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                self.accum(grads, *b, |gb| {
                    for (x, y) in gb.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            Op::AddBias { a, b } => {
                let (r, c) = self.nodes[*a].value.shape_2d();
                self.accum(grads, *a, |ga| {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                self.accum(grads, *b, |gb| {
                    for i in 0..r {
                        for j in 0..c {
                            gb[j] += g[i * c + j];
                        }
                    }
                });
            }
            Op::Sub { a, b } => {
                self.accum(grads, *a, |ga| {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                self.accum(grads, *b, |gb| {
                    for (x, y) in gb.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::MulElem { a, b } => {
                let av = self.nodes[*a].value.data.clone();
                let bv = self.nodes[*b].value.data.clone();
                self.accum(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                self.accum(grads, *b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::DivElem { a, b } => {
                let av = self.nodes[*a].value.data.clone();
                let bv = self.nodes[*b].value.data.clone();
                self.accum(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] / bv[i];
                    }
                });
                self.accum(grads, *b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                });
            }
            Op::Scale { a, k } => {
                let k = *k;
                self.accum(grads, *a, |ga| {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += k * y;
                    }
                });
            }
            Op::AddScalar { a } => {
                self.accum(grads, *a, |ga| {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            Op::Neg { a } => {
                self.accum(grads, *a, |ga| {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::Sum { a } => {
                let s = g[0];
                self.accum(grads, *a, |ga| {
                    for x in ga.iter_mut() {
                        *x += s;
                    }
                });
            }
            Op::Mean { a } => {
                let n = self.nodes[*a].value.numel() as f64;
                let s = g[0] / n;
                self.accum(grads, *a, |ga| {
                    for x in ga.iter_mut() {
                        *x += s;
                    }
                });
            }
            Op::Softmax { a } => {
                let (r, c) = val.shape_2d();
                let y = &val.data;
                self.accum(grads, *a, |ga| {
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            ga[i * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let (r, c) = self.nodes[*x].value.shape_2d();
                let gv = self.nodes[*gain].value.data.clone();
                self.accum(grads, *gain, |gg| {
                    for i in 0..r {
                        for j in 0..c {
                            gg[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                });
                self.accum(grads, *bias, |gb| {
                    for i in 0..r {
                        for j in 0..c {
                            gb[j] += g[i * c + j];
                        }
                    }
                });
                self.accum(grads, *x, |gx| {
                    for i in 0..r {
                        let xh = &xhat[i * c..(i + 1) * c];
                        // dxhat = g * gain
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..c {
                            let d = g[i * c + j] * gv[j];
                            mean_dxh += d;
                            mean_dxh_xh += d * xh[j];
                        }
                        mean_dxh /= c as f64;
                        mean_dxh_xh /= c as f64;
                        for j in 0..c {
                            let d = g[i * c + j] * gv[j];
                            gx[i * c + j] += inv_std[i] * (d - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                });
            }
            Op::Gelu { a } => {
                let xv = self.nodes[*a].value.data.clone();
                self.accum(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * gelu_grad(xv[i]);
                    }
                });
            }
            Op::Tanh { a } => {
                let y = val.data.clone();
                self.accum(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Sigmoid { a } => {
                let y = val.data.clone();
                self.accum(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Sqrt { a } => {
                let y = val.data.clone();
                self.accum(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * 0.5 / y[i];
                    }
                });
            }
            Op::Dropout { a, mask, keep } => {
                let keep = *keep;
                self.accum(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        if mask[i] {
                            ga[i] += g[i] / keep;
                        }
                    }
                });
            }
            Op::Transpose { a } => {
                let (r, c) = self.nodes[*a].value.shape_2d();
                self.accum(grads, *a, |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p].value.numel();
                    let seg = &g[off..off + n];
                    self.accum(grads, p, |gp| {
                        for (x, y) in gp.iter_mut().zip(seg) {
                            *x += y;
                        }
                    });
                    off += n;
                }
            }
            Op::SliceRows { a, start } => {
                let (_, c) = self.nodes[*a].value.shape_2d();
                let off = start * c;
                self.accum(grads, *a, |ga| {
                    for (i, y) in g.iter().enumerate() {
                        ga[off + i] += y;
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let (r, total) = val.shape_2d();
                let mut off = 0;
                for &p in parts {
                    let (_, w) = self.nodes[p].value.shape_2d();
                    self.accum(grads, p, |gp| {
                        for i in 0..r {
                            for j in 0..w {
                                gp[i * w + j] += g[i * total + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::SliceCols { a, start } => {
                let (r, c) = self.nodes[*a].value.shape_2d();
                let (_, w) = val.shape_2d();
                self.accum(grads, *a, |ga| {
                    for i in 0..r {
                        for j in 0..w {
                            ga[i * c + start + j] += g[i * w + j];
                        }
                    }
                });
            }
            Op::EmbedRows { table, indices } => {
                let (_, c) = self.nodes[*table].value.shape_2d();
                self.accum(grads, *table, |gt| {
                    for (row, &i) in indices.iter().enumerate() {
                        for j in 0..c {
                            gt[i * c + j] += g[row * c + j];
                        }
                    }
                });
            }
            Op::MaxRows { a, argmax } => {
                let (_, c) = self.nodes[*a].value.shape_2d();
                self.accum(grads, *a, |ga| {
                    for j in 0..c {
                        ga[argmax[j] * c + j] += g[j];
                    }
                });
            }
            Op::MeanRows { a } => {
                let (r, c) = self.nodes[*a].value.shape_2d();
                let inv = 1.0 / r as f64;
                self.accum(grads, *a, |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j] * inv;
                        }
                    }
                });
            }
            Op::Rodrigues { v } => {
                let vv = self.nodes[*v].value.data.clone();
                let r = &val.data;
                self.accum(grads, *v, |gv| {
                    let dv = rodrigues_grad(&vv, r, g);
                    for i in 0..3 {
                        gv[i] += dv[i];
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let (r, c) = self.nodes[*logits].value.shape_2d();
                let s = g[0] / r as f64;
                self.accum(grads, *logits, |gl| {
                    for i in 0..r {
                        for j in 0..c {
                            let onehot = if labels[i] == j { 1.0 } else { 0.0 };
                            gl[i * c + j] += s * (probs[i * c + j] - onehot);
                        }
                    }
                });
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn skew(v: [f64; 3]) -> [f64; 9] {
    [0.0, -v[2], v[1], v[2], 0.0, -v[0], -v[1], v[0], 0.0]
}

/// Rodrigues rotation matrix, Taylor-expanded near zero angle.
pub(crate) fn rodrigues_fwd(v: &[f64]) -> [f64; 9] {
    let s = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
    let theta = s.sqrt();
    let (a, b) = if theta < 1e-8 {
        (1.0 - s / 6.0, 0.5 - s / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / s)
    };
    let k = skew([v[0], v[1], v[2]]);
    let mut k2 = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = 0.0;
            for l in 0..3 {
                acc += k[i * 3 + l] * k[l * 3 + j];
            }
            k2[i * 3 + j] = acc;
        }
    }
    let mut r = [0.0; 9];
    for i in 0..9 {
        r[i] = a * k[i] + b * k2[i];
    }
    r[0] += 1.0;
    r[4] += 1.0;
    r[8] += 1.0;
    r
}

/// dL/dv given dL/dR, via the rotation-vector Jacobian
/// dR/dv_i = ((v_i [v]x + [v x (I - R) e_i]x) / |v|^2) R, with the
/// |v| -> 0 limit dR/dv_i = [e_i]x.
fn rodrigues_grad(v: &[f64], r: &[f64], g: &[f64]) -> [f64; 3] {
    let s = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
    let mut out = [0.0; 3];
    if s < 1e-16 {
        for i in 0..3 {
            let mut e = [0.0; 3];
            e[i] = 1.0;
            let d = skew(e);
            out[i] = d.iter().zip(g).map(|(a, b)| a * b).sum();
        }
        return out;
    }
    let kv = skew([v[0], v[1], v[2]]);
    for i in 0..3 {
        // w = v x ((I - R) e_i): column i of (I - R), crossed with v.
        let col = [
            (if i == 0 { 1.0 } else { 0.0 }) - r[i],
            (if i == 1 { 1.0 } else { 0.0 }) - r[3 + i],
            (if i == 2 { 1.0 } else { 0.0 }) - r[6 + i],
        ];
        let w = [
            v[1] * col[2] - v[2] * col[1],
            v[2] * col[0] - v[0] * col[2],
            v[0] * col[1] - v[1] * col[0],
        ];
        let kw = skew(w);
        // d = ((v_i kv + kw) / s) @ R
        let mut dsum = 0.0;
        for row in 0..3 {
            for cc in 0..3 {
                let mut m = 0.0;
                for l in 0..3 {
                    m += (v[i] * kv[row * 3 + l] + kw[row * 3 + l]) * r[l * 3 + cc];
                }
                dsum += m / s * g[row * 3 + cc];
            }
        }
        out[i] = dsum;
    }
    out
}
