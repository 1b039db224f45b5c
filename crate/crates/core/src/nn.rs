//! Layer helpers shared by the encoder and the backbone. Parameters live in a
//! [`ParamStore`] under dotted prefixes; the helpers here register and apply them.

use ndarray::{Array1, Array2};

use crate::autograd::{Tape, Var};
use crate::params::ParamStore;
use crate::rng::StreamRng;

pub const LN_EPS: f64 = 1e-5;

pub fn register_linear(
    store: &mut ParamStore,
    rng: &mut StreamRng,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    gain: f64,
    trainable: bool,
) {
    register_weight(store, rng, prefix, fan_in, fan_out, gain, trainable);
    store.init_const(&format!("{prefix}.b"), &[fan_out], 0.0, trainable);
}

/// A bias-free linear map.
pub fn register_weight(
    store: &mut ParamStore,
    rng: &mut StreamRng,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    gain: f64,
    trainable: bool,
) {
    let std = gain / (fan_in as f64).sqrt();
    store.init_normal(rng, &format!("{prefix}.w"), &[fan_in, fan_out], std, trainable);
}

/// Applies `prefix.w` and, when registered, `prefix.b`.
pub fn linear(tape: &Tape, store: &ParamStore, prefix: &str, x: Var) -> Var {
    let w = tape.param(store, &format!("{prefix}.w"));
    let bias_name = format!("{prefix}.b");
    let b = store.get(&bias_name).map(|_| tape.param(store, &bias_name));
    tape.linear(x, w, b)
}

/// Affine layer norm over the last axis with `prefix.gain` and `prefix.shift`.
pub fn register_layer_norm(store: &mut ParamStore, prefix: &str, d: usize, trainable: bool) {
    store.init_const(&format!("{prefix}.gain"), &[d], 1.0, trainable);
    store.init_const(&format!("{prefix}.shift"), &[d], 0.0, trainable);
}

pub fn layer_norm(tape: &Tape, store: &ParamStore, prefix: &str, x: Var) -> Var {
    let n = tape.layer_norm_rows(x, LN_EPS);
    let g = tape.param(store, &format!("{prefix}.gain"));
    let s = tape.param(store, &format!("{prefix}.shift"));
    tape.add_row(tape.mul_row(n, g), s)
}

/// Registers query/key/value/output projections. Keys and values read from
/// `kv_dim`-wide tokens. The key projection has no bias: a key bias shifts every
/// score of a query by the same amount and cancels in the softmax.
pub fn register_attention(
    store: &mut ParamStore,
    rng: &mut StreamRng,
    prefix: &str,
    d_model: usize,
    kv_dim: usize,
    trainable: bool,
) {
    register_linear(store, rng, &format!("{prefix}.q"), d_model, d_model, 1.0, trainable);
    register_weight(store, rng, &format!("{prefix}.k"), kv_dim, d_model, 1.0, trainable);
    register_linear(store, rng, &format!("{prefix}.v"), kv_dim, d_model, 1.0, trainable);
    register_linear(store, rng, &format!("{prefix}.o"), d_model, d_model, 1.0, trainable);
}

/// Unmasked multi-head attention of `queries: [n, d]` over `context: [m, kv]`.
/// No positional terms are added here.
pub fn attention(
    tape: &Tape,
    store: &ParamStore,
    prefix: &str,
    queries: Var,
    context: Var,
    n_heads: usize,
) -> Var {
    let q = linear(tape, store, &format!("{prefix}.q"), queries);
    let k = linear(tape, store, &format!("{prefix}.k"), context);
    let v = linear(tape, store, &format!("{prefix}.v"), context);
    let d = tape.shape(q)[1];
    let head = d / n_heads;
    let scale = 1.0 / (head as f64).sqrt();
    let heads: Vec<Var> = (0..n_heads)
        .map(|h| {
            let qh = tape.slice(q, 1, h * head, head);
            let kh = tape.slice(k, 1, h * head, head);
            let vh = tape.slice(v, 1, h * head, head);
            let kt = tape.transpose(kh);
            let scores = tape.scale(tape.matmul(qh, kt), scale);
            let probs = tape.softmax_rows(scores);
            tape.matmul(probs, vh)
        })
        .collect();
    let merged = tape.concat(&heads, 1);
    linear(tape, store, &format!("{prefix}.o"), merged)
}

/// Sinusoidal embedding of a scalar position (timestep) into `dim` features.
pub fn sinusoidal(position: f64, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        out[i] = (position * freq).sin();
        out[i + half] = (position * freq).cos();
    }
    out
}

/// Fixed 3D sinusoidal positions for a `(gt, gh, gw)` token grid, row-major.
/// The width is split into three near-equal even chunks, one per axis.
pub fn positions_3d(grid: (usize, usize, usize), dim: usize) -> Array2<f64> {
    let chunk = (dim / 3) & !1;
    let last = dim - 2 * chunk;
    let (gt, gh, gw) = grid;
    let mut out = Array2::zeros((gt * gh * gw, dim));
    let mut row = 0;
    for t in 0..gt {
        for h in 0..gh {
            for w in 0..gw {
                let et = sinusoidal(t as f64, chunk);
                let eh = sinusoidal(h as f64, chunk);
                let ew = sinusoidal(w as f64, last);
                let mut r = out.row_mut(row);
                r.slice_mut(ndarray::s![..chunk]).assign(&et);
                r.slice_mut(ndarray::s![chunk..2 * chunk]).assign(&eh);
                r.slice_mut(ndarray::s![2 * chunk..]).assign(&ew);
                row += 1;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoid_at_zero() {
        let e = sinusoidal(0.0, 8);
        assert_eq!(e.slice(ndarray::s![..4]).sum(), 0.0);
        assert_eq!(e.slice(ndarray::s![4..]).sum(), 4.0);
    }

    #[test]
    fn positions_are_distinct() {
        let p = positions_3d((2, 2, 2), 12);
        for i in 0..8 {
            for j in 0..i {
                assert!((&p.row(i) - &p.row(j)).mapv(f64::abs).sum() > 1e-6);
            }
        }
    }
}
