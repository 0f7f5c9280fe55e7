use std::f64::consts::PI;

use crate::diff::{Graph, Tensor, Var};
use crate::error::Result;

/// Frequencies per axis for an encoding of width `dim`.
fn n_freq(dim: usize) -> usize {
    dim / 6
}

/// Sinusoidal encoding of a normalized point.
///
/// For axis `a` and frequency `i` (angular frequency `π·2^i`), slots
/// `2(a·F + i)` and `2(a·F + i) + 1` hold the sine and cosine; trailing slots
/// left over when `dim` is not a multiple of 6 are zero.
pub fn positional_encoding(p: &[f64; 3], dim: usize) -> Vec<f64> {
    let f = n_freq(dim);
    let mut out = vec![0.0; dim];
    for a in 0..3 {
        for i in 0..f {
            let arg = p[a] * PI * (1u64 << i) as f64;
            out[2 * (a * f + i)] = arg.sin();
            out[2 * (a * f + i) + 1] = arg.cos();
        }
    }
    out
}

/// Graph form of [`positional_encoding`] over rows of `points [Q, 3]`.
pub fn positional_encoding_graph(g: &mut Graph, points: Var, dim: usize) -> Result<Var> {
    let f = n_freq(dim);
    let q = g.shape(points)[0];
    let mut m = Tensor::zeros(&[3, 3 * f]);
    for a in 0..3 {
        for i in 0..f {
            m.data[a * 3 * f + a * f + i] = PI * (1u64 << i) as f64;
        }
    }
    let m = g.constant(m);
    let args = g.matmul(points, m)?;
    let args = g.reshape(args, &[q, 3 * f, 1])?;
    let s = g.sin(args);
    let c = g.cos(args);
    let sc = g.concat(&[s, c], 2)?;
    let enc = g.reshape(sc, &[q, 6 * f])?;
    if 6 * f == dim {
        return Ok(enc);
    }
    let pad = g.constant(Tensor::zeros(&[q, dim - 6 * f]));
    g.concat(&[enc, pad], 1)
}
