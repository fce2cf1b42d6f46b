//! Shared condition-encoder numerics.
//!
//! The prior and the contact net each own their weights, but the encoder
//! *shapes* are identical: a bag-of-words text embedding with a linear
//! projection, a per-point MLP with max pooling for object point sets, and a
//! two-layer MLP for flat feature rows.  Each encoder exists twice: a direct
//! path that reads parameter values straight from the store (cheap, used at
//! inference) and a tape path used during training.  Unit tests in the
//! owning modules pin the two paths to agree to within 1e-12.

use crate::ad::nn::{Bound, Linear};
use crate::ad::{ParamId, ParamStore, Tape, Tensor, Var};

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

/// Multiplies a row vector by a stored `[in, out]` weight matrix and adds the
/// bias row.
fn affine_row(store: &ParamStore, lin: &Linear, row: &[f64]) -> Vec<f64> {
    let w = store.get(lin.w);
    let b = store.get(lin.b);
    let (_, out) = w.shape_2d();
    let mut y = b.data.clone();
    for (i, xi) in row.iter().enumerate() {
        for (yv, wv) in y.iter_mut().zip(&w.data[i * out..(i + 1) * out]) {
            *yv += xi * wv;
        }
    }
    y
}

/// Direct path: mean of embedding-table rows for `ids`, then a linear
/// projection.
pub(crate) fn mean_embed_project(
    store: &ParamStore,
    table: ParamId,
    proj: &Linear,
    ids: &[usize],
) -> Vec<f64> {
    let t = store.get(table);
    let (_, d) = t.shape_2d();
    let mut mean = vec![0.0; d];
    for &id in ids {
        for (m, v) in mean.iter_mut().zip(&t.data[id * d..(id + 1) * d]) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= ids.len() as f64;
    }
    affine_row(store, proj, &mean)
}

/// Tape path of [`mean_embed_project`].
pub(crate) fn mean_embed_project_var(
    tape: &mut Tape,
    bound: &Bound,
    table: ParamId,
    proj: &Linear,
    ids: &[usize],
) -> Var {
    let rows = tape.embed_rows(bound.var(table), ids);
    let mean = tape.mean_rows(rows);
    proj.forward(tape, bound, mean)
}

/// Direct path: linear → gelu → linear applied to one flat row.
pub(crate) fn mlp2_row(store: &ParamStore, l1: &Linear, l2: &Linear, row: &[f64]) -> Vec<f64> {
    let mut h = affine_row(store, l1, row);
    for v in h.iter_mut() {
        *v = gelu_scalar(*v);
    }
    affine_row(store, l2, &h)
}

/// Tape path of [`mlp2_row`].
pub(crate) fn mlp2_row_var(
    tape: &mut Tape,
    bound: &Bound,
    l1: &Linear,
    l2: &Linear,
    row: &[f64],
) -> Var {
    let x = tape.constant(Tensor::matrix(1, row.len(), row.to_vec()).expect("mlp row"));
    let h = l1.forward(tape, bound, x);
    let h = tape.gelu(h);
    l2.forward(tape, bound, h)
}

/// Direct path of the point-set encoder: the shared per-point MLP plus the
/// max-pooled summary.  Input points must already be centered.
pub(crate) fn point_mlp(
    store: &ParamStore,
    l1: &Linear,
    l2: &Linear,
    centered: &[[f64; 3]],
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let d = store.get(l2.b).data.len();
    let mut feats = Vec::with_capacity(centered.len());
    let mut pooled = vec![f64::NEG_INFINITY; d];
    for p in centered {
        let f = mlp2_row(store, l1, l2, p);
        for (pm, fv) in pooled.iter_mut().zip(&f) {
            *pm = pm.max(*fv);
        }
        feats.push(f);
    }
    (feats, pooled)
}

/// Tape path of the per-point features from [`point_mlp`] (an `[n, d]`
/// matrix; pooling is not needed on the tape side).
pub(crate) fn point_mlp_var(
    tape: &mut Tape,
    bound: &Bound,
    l1: &Linear,
    l2: &Linear,
    centered: &[[f64; 3]],
) -> Var {
    let n = centered.len();
    let flat: Vec<f64> = centered.iter().flat_map(|p| p.iter().copied()).collect();
    let pts = tape.constant(Tensor::matrix(n, 3, flat).expect("points matrix"));
    let h = l1.forward(tape, bound, pts);
    let h = tape.gelu(h);
    l2.forward(tape, bound, h)
}
