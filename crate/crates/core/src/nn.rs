//! Small shared building blocks: seeded initializers, plain (no-grad)
//! transformer pieces for the frozen encoders, and tape-side helpers reused
//! by the fusion module and the UNet attention blocks.

use ndarray::{Array1, Array2, ArrayD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tape::{Tape, Var};

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| {
        let x: f64 = StandardNormal.sample(rng);
        x * std
    }).collect();
    ArrayD::from_shape_vec(shape.to_vec(), data).unwrap()
}

pub fn randn2(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    randn(rng, &[rows, cols], std).into_dimensionality().unwrap()
}

pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Fixed sinusoidal position encoding table, one row per position.
pub fn sinusoidal_table(len: usize, dim: usize) -> Array2<f64> {
    let mut t = Array2::<f64>::zeros((len, dim));
    for p in 0..len {
        for k in 0..dim {
            let i = k / 2;
            let freq = 1.0 / 10_000f64.powf(2.0 * i as f64 / dim as f64);
            let v = p as f64 * freq;
            t[[p, k]] = if k % 2 == 0 { v.sin() } else { v.cos() };
        }
    }
    t
}

/// Sinusoidal timestep embedding vector.
pub fn timestep_embedding(t: usize, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let mut out = Array1::<f64>::zeros(dim);
    for i in 0..half {
        let freq = (-(i as f64) * (10_000f64).ln() / (half.max(2) - 1) as f64).exp();
        out[i] = (t as f64 * freq).sin();
        out[half + i] = (t as f64 * freq).cos();
    }
    out
}

// ---------------------------------------------------------------------------
// plain (no-grad) pieces for the frozen encoders
// ---------------------------------------------------------------------------

pub fn softmax_rows_plain(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s: f64 = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}

pub fn layer_norm_rows_plain(x: &Array2<f64>, eps: f64) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    out
}

pub fn silu_plain(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v * crate::tape::sigmoid(v))
}

/// Single multi-head self-attention over `x` with per-head projections.
/// `heads[h] = (wq, wk, wv)` each `[d, d_h]`; `wo` is `[heads*d_h, d]`.
pub fn mha_plain(
    x: &Array2<f64>,
    heads: &[(Array2<f64>, Array2<f64>, Array2<f64>)],
    wo: &Array2<f64>,
) -> Array2<f64> {
    let mut concat = Vec::new();
    for (wq, wk, wv) in heads {
        let q = x.dot(wq);
        let k = x.dot(wk);
        let v = x.dot(wv);
        let scale = 1.0 / (wq.ncols() as f64).sqrt();
        let mut scores = q.dot(&k.t()) * scale;
        softmax_rows_plain(&mut scores);
        concat.push(scores.dot(&v));
    }
    let views: Vec<_> = concat.iter().map(|a| a.view()).collect();
    let cat = ndarray::concatenate(ndarray::Axis(1), &views).unwrap();
    cat.dot(wo)
}

// ---------------------------------------------------------------------------
// tape-side helpers
// ---------------------------------------------------------------------------

/// x [n, din] * w [din, dout] + b [dout]
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let y = tape.matmul(x, w);
    tape.add_row_broadcast(y, b)
}

pub fn layer_norm_affine(tape: &mut Tape, x: Var, gamma: Var, beta: Var) -> Var {
    let n = tape.layer_norm_rows(x, 1e-6);
    let n = tape.mul_row_broadcast(n, gamma);
    tape.add_row_broadcast(n, beta)
}

/// Scaled dot-product attention: Q from `q_in`, K/V from `kv_in`.
/// Shapes: q_in [n, dq_in], kv_in [m, dkv_in], wq [dq_in, d], wk/wv
/// [dkv_in, d], softmax(Q K^T / sqrt(d)) V -> [n, d].
pub fn attention(tape: &mut Tape, q_in: Var, kv_in: Var, wq: Var, wk: Var, wv: Var) -> Var {
    let q = tape.matmul(q_in, wq);
    let k = tape.matmul(kv_in, wk);
    let v = tape.matmul(kv_in, wv);
    let d = tape.value(q).shape()[1] as f64;
    let kt = tape.transpose2d(k);
    let scores = tape.matmul(q, kt);
    let scores = tape.scale(scores, 1.0 / d.sqrt());
    let probs = tape.softmax_rows(scores);
    tape.matmul(probs, v)
}

/// Multi-head self-attention on tape, mirroring [`mha_plain`].
pub fn mha(
    tape: &mut Tape,
    x: Var,
    heads: &[(Var, Var, Var)],
    wo: Var,
) -> Var {
    let mut parts: Vec<Var> = Vec::new();
    for &(wq, wk, wv) in heads {
        let h = attention(tape, x, x, wq, wk, wv);
        parts.push(tape.transpose2d(h));
    }
    let mut cat = parts[0];
    for p in &parts[1..] {
        cat = tape.concat_rows(cat, *p);
    }
    let cat = tape.transpose2d(cat);
    tape.matmul(cat, wo)
}
