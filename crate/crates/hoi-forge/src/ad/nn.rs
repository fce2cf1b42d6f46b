//! Neural-network building blocks over the autodiff tape.
//!
//! Parameters live in a [`ParamStore`]; layers hold [`ParamId`]s and are
//! bound onto a fresh tape each forward pass via [`ParamStore::bind`].
//! All layers are deterministic given the caller-provided RNG.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Stable handle to a named parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

struct Param {
    name: String,
    tensor: Tensor,
}

/// Owner of all trainable tensors for one model.
#[derive(Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    /// Register a tensor under a unique name.
    pub fn add(&mut self, name: &str, tensor: Tensor) -> ParamId {
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name `{name}`"
        );
        self.params.push(Param { name: name.to_string(), tensor });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|p| (p.name.as_str(), &p.tensor))
    }

    /// Replace the value of the parameter called `name`, shape-checked.
    pub fn set_by_name(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?;
        if p.tensor.shape != tensor.shape {
            return Err(Error::contract(format!(
                "parameter `{name}` shape {:?} cannot take {:?}",
                p.tensor.shape, tensor.shape
            )));
        }
        p.tensor = tensor.with_grad();
        Ok(())
    }

    /// Place every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| tape.param_leaf(p.tensor.clone(), i))
            .collect();
        Bound { vars }
    }

    /// Zeroed gradient buffers aligned with parameter indices.
    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect()
    }
}

/// Parameters of one store placed on one tape.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

// ---- initializers ----

/// Glorot/Xavier uniform init for a `[fan_in, fan_out]` weight.
pub fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).unwrap()
}

/// Small-normal init (std 0.02) for embedding-like tables.
pub fn small_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    use rand_distr::{Distribution, Normal};
    let n = Normal::new(0.0, 0.02).unwrap();
    let data = (0..rows * cols).map(|_| n.sample(rng)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

// ---- layers ----

/// Affine map `y = x W + b`, `W: [in, out]`.
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut ChaCha8Rng,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = store.add(&format!("{prefix}.w"), glorot(rng, in_dim, out_dim));
        let b = store.add(&format!("{prefix}.b"), Tensor::zeros(vec![out_dim]));
        Linear { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        let y = tape.matmul(x, bound.var(self.w));
        tape.add_bias(y, bound.var(self.b))
    }
}

/// Layer normalization with learned gain and bias.
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        let gain = store.add(&format!("{prefix}.gain"), Tensor::vector(vec![1.0; dim]));
        let bias = store.add(&format!("{prefix}.bias"), Tensor::zeros(vec![dim]));
        LayerNorm { gain, bias, eps: 1e-5 }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        tape.layer_norm(x, bound.var(self.gain), bound.var(self.bias), self.eps)
    }
}

/// Scaled dot-product attention without projections.
///
/// `q: [n, d]`, `k, v: [m, d]`; columns are split into `heads` equal
/// slices attended independently, then re-concatenated.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Var {
    let (_, d) = tape.value(q).shape_2d();
    assert_eq!(d % heads, 0, "model dim {d} not divisible by {heads} heads");
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt);
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax(scores);
        outs.push(tape.matmul(attn, vh));
    }
    if heads == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)
    }
}

/// Multi-head attention with learned Q/K/V/output projections.
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut ChaCha8Rng,
        dim: usize,
        heads: usize,
    ) -> Self {
        assert_eq!(dim % heads, 0, "model dim {dim} not divisible by {heads} heads");
        MultiHeadAttention {
            wq: Linear::new(store, &format!("{prefix}.q"), rng, dim, dim),
            wk: Linear::new(store, &format!("{prefix}.k"), rng, dim, dim),
            wv: Linear::new(store, &format!("{prefix}.v"), rng, dim, dim),
            wo: Linear::new(store, &format!("{prefix}.o"), rng, dim, dim),
            heads,
        }
    }

    /// `x` attends over `mem` (pass `mem = x` for self-attention).
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, mem: Var) -> Var {
        let q = self.wq.forward(tape, bound, x);
        let k = self.wk.forward(tape, bound, mem);
        let v = self.wv.forward(tape, bound, mem);
        let ctx = attention(tape, q, k, v, self.heads);
        self.wo.forward(tape, bound, ctx)
    }
}

/// Two-layer position-wise feed-forward block with GELU.
pub struct FeedForward {
    pub lin1: Linear,
    pub lin2: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut ChaCha8Rng,
        dim: usize,
        hidden: usize,
    ) -> Self {
        FeedForward {
            lin1: Linear::new(store, &format!("{prefix}.ff1"), rng, dim, hidden),
            lin2: Linear::new(store, &format!("{prefix}.ff2"), rng, hidden, dim),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        let h = self.lin1.forward(tape, bound, x);
        let h = tape.gelu(h);
        self.lin2.forward(tape, bound, h)
    }
}

/// Training-vs-eval switch carried through forward passes; holds the RNG
/// that drives dropout when training.
pub enum Mode<'a> {
    Train(&'a mut ChaCha8Rng),
    Eval,
}

impl Mode<'_> {
    pub fn dropout(&mut self, tape: &mut Tape, x: Var, rate: f64) -> Var {
        match self {
            Mode::Train(rng) => tape.dropout(x, rate, rng),
            Mode::Eval => x,
        }
    }
}

/// Pre-norm transformer encoder layer: self-attention then feed-forward,
/// each behind a residual connection.
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
    pub dropout: f64,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut ChaCha8Rng,
        dim: usize,
        heads: usize,
        ff_hidden: usize,
        dropout: f64,
    ) -> Self {
        EncoderLayer {
            ln1: LayerNorm::new(store, &format!("{prefix}.ln1"), dim),
            attn: MultiHeadAttention::new(store, &format!("{prefix}.attn"), rng, dim, heads),
            ln2: LayerNorm::new(store, &format!("{prefix}.ln2"), dim),
            ff: FeedForward::new(store, &format!("{prefix}.ff"), rng, dim, ff_hidden),
            dropout,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, mode: &mut Mode) -> Var {
        let xn = self.ln1.forward(tape, bound, x);
        let a = self.attn.forward(tape, bound, xn, xn);
        let a = mode.dropout(tape, a, self.dropout);
        let x = tape.add(x, a);
        let xn = self.ln2.forward(tape, bound, x);
        let f = self.ff.forward(tape, bound, xn);
        let f = mode.dropout(tape, f, self.dropout);
        tape.add(x, f)
    }
}

/// Pre-norm cross-attention block: the branch stream attends over an
/// external memory sequence, behind a residual connection.
pub struct CrossAttnBlock {
    pub ln_x: LayerNorm,
    pub ln_mem: LayerNorm,
    pub attn: MultiHeadAttention,
    pub dropout: f64,
}

impl CrossAttnBlock {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut ChaCha8Rng,
        dim: usize,
        heads: usize,
        dropout: f64,
    ) -> Self {
        CrossAttnBlock {
            ln_x: LayerNorm::new(store, &format!("{prefix}.lnx"), dim),
            ln_mem: LayerNorm::new(store, &format!("{prefix}.lnm"), dim),
            attn: MultiHeadAttention::new(store, &format!("{prefix}.attn"), rng, dim, heads),
            dropout,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, mem: Var, mode: &mut Mode) -> Var {
        let xn = self.ln_x.forward(tape, bound, x);
        let mn = self.ln_mem.forward(tape, bound, mem);
        let a = self.attn.forward(tape, bound, xn, mn);
        let a = mode.dropout(tape, a, self.dropout);
        tape.add(x, a)
    }
}

/// Gated recurrent unit cell for sequence classification.
pub struct GruCell {
    pub wx: Linear,
    pub wh: Linear,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut ChaCha8Rng,
        input: usize,
        hidden: usize,
    ) -> Self {
        GruCell {
            wx: Linear::new(store, &format!("{prefix}.wx"), rng, input, 3 * hidden),
            wh: Linear::new(store, &format!("{prefix}.wh"), rng, hidden, 3 * hidden),
            hidden,
        }
    }

    /// One step: `x [1, input]`, `h [1, hidden]` -> new hidden `[1, hidden]`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, h: Var) -> Var {
        let hd = self.hidden;
        let gx = self.wx.forward(tape, bound, x);
        let gh = self.wh.forward(tape, bound, h);
        let zx = tape.slice_cols(gx, 0, hd);
        let rx = tape.slice_cols(gx, hd, hd);
        let nx = tape.slice_cols(gx, 2 * hd, hd);
        let zh = tape.slice_cols(gh, 0, hd);
        let rh = tape.slice_cols(gh, hd, hd);
        let nh = tape.slice_cols(gh, 2 * hd, hd);
        let z_in = tape.add(zx, zh);
        let z = tape.sigmoid(z_in);
        let r_in = tape.add(rx, rh);
        let r = tape.sigmoid(r_in);
        let rn = tape.mul(r, nh);
        let n_in = tape.add(nx, rn);
        let n = tape.tanh(n_in);
        // h' = (1 - z) * n + z * h
        let neg_z = tape.neg(z);
        let one_minus_z = tape.add_scalar(neg_z, 1.0);
        let a = tape.mul(one_minus_z, n);
        let b = tape.mul(z, h);
        tape.add(a, b)
    }
}

/// Sinusoidal position/timestep embedding of even dimension `dim`.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Vec<f64> {
    assert!(dim % 2 == 0, "sinusoidal embedding wants an even dim");
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        out[i] = (t * freq).sin();
        out[half + i] = (t * freq).cos();
    }
    out
}

/// Global L2 gradient clipping; returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter() {
        for v in g {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}
