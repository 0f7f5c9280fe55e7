//! Finite-difference audit over every primitive op, on seeded random shapes.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::gradcheck::{grad_check, random_projection, GradCheckReport};
use super::graph::{Graph, Var};
use super::kernels::Rulebook;
use super::tensor::Tensor;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor { shape: shape.to_vec(), data: (0..n).map(|_| rng.gen_range(lo..hi)).collect() }
}

/// Values bounded away from zero, for ops with a kink or pole there.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = rand_tensor(rng, shape, 0.2, 1.5);
    for v in &mut t.data {
        if rng.gen_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

fn small_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![rng.gen_range(2..5), rng.gen_range(2..6)]
}

/// Random submanifold rulebook over `n` sites scattered on a 4³ grid.
fn random_rulebook(rng: &mut ChaCha8Rng, n: usize) -> Rulebook {
    let mut sites: Vec<[i32; 3]> = Vec::new();
    while sites.len() < n {
        let s = [rng.gen_range(0..4), rng.gen_range(0..4), rng.gen_range(0..4)];
        if !sites.contains(&s) {
            sites.push(s);
        }
    }
    let mut pairs = vec![Vec::new(); 27];
    for (o, so) in sites.iter().enumerate() {
        for (i, si) in sites.iter().enumerate() {
            let d = [si[0] - so[0] + 1, si[1] - so[1] + 1, si[2] - so[2] + 1];
            if d.iter().all(|&x| (0..3).contains(&x)) {
                let k = (d[0] * 9 + d[1] * 3 + d[2]) as usize;
                pairs[k].push((i as u32, o as u32));
            }
        }
    }
    Rulebook { n_in: n, n_out: n, pairs }
}

type Case = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>);

fn cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let s = small_shape(rng);
    let (r, c) = (s[0], s[1]);
    let mut v: Vec<Case> = Vec::new();
    let p = |g: &mut Graph, out: Var| random_projection(g, out, 99);

    v.push((
        "add",
        vec![rand_tensor(rng, &s, -1.0, 1.0), rand_tensor(rng, &[c], -1.0, 1.0)],
        Box::new(move |g, x| {
            let o = g.add(x[0], x[1])?;
            p(g, o)
        }),
    ));
    v.push((
        "sub",
        vec![rand_tensor(rng, &[c], -1.0, 1.0), rand_tensor(rng, &s, -1.0, 1.0)],
        Box::new(move |g, x| {
            let o = g.sub(x[0], x[1])?;
            p(g, o)
        }),
    ));
    v.push((
        "mul",
        vec![rand_tensor(rng, &s, -1.0, 1.0), rand_tensor(rng, &s, -1.0, 1.0)],
        Box::new(move |g, x| {
            let o = g.mul(x[0], x[1])?;
            p(g, o)
        }),
    ));
    v.push((
        "div",
        vec![rand_tensor(rng, &s, -1.0, 1.0), rand_away_from_zero(rng, &[c])],
        Box::new(move |g, x| {
            let o = g.div(x[0], x[1])?;
            p(g, o)
        }),
    ));
    let k = rng.gen_range(2..5);
    v.push((
        "matmul",
        vec![rand_tensor(rng, &[r, k], -1.0, 1.0), rand_tensor(rng, &[k, c], -1.0, 1.0)],
        Box::new(move |g, x| {
            let o = g.matmul(x[0], x[1])?;
            p(g, o)
        }),
    ));
    v.push((
        "transpose",
        vec![rand_tensor(rng, &s, -1.0, 1.0)],
        Box::new(move |g, x| {
            let o = g.transpose(x[0])?;
            p(g, o)
        }),
    ));
    v.push((
        "relu",
        vec![rand_away_from_zero(rng, &s)],
        Box::new(move |g, x| {
            let o = g.relu(x[0]);
            p(g, o)
        }),
    ));
    v.push((
        "softmax_last",
        vec![rand_tensor(rng, &s, -2.0, 2.0)],
        Box::new(move |g, x| {
            let o = g.softmax(x[0], 1)?;
            p(g, o)
        }),
    ));
    v.push((
        "softmax_first",
        vec![rand_tensor(rng, &s, -2.0, 2.0)],
        Box::new(move |g, x| {
            let o = g.softmax(x[0], 0)?;
            p(g, o)
        }),
    ));
    v.push((
        "layer_norm",
        vec![rand_tensor(rng, &s, -2.0, 2.0)],
        Box::new(move |g, x| {
            let o = g.layer_norm(x[0], 1e-5)?;
            p(g, o)
        }),
    ));
    v.push((
        "sigmoid",
        vec![rand_tensor(rng, &s, -3.0, 3.0)],
        Box::new(move |g, x| {
            let o = g.sigmoid(x[0]);
            p(g, o)
        }),
    ));
    v.push((
        "sin",
        vec![rand_tensor(rng, &s, -3.0, 3.0)],
        Box::new(move |g, x| {
            let o = g.sin(x[0]);
            p(g, o)
        }),
    ));
    v.push((
        "cos",
        vec![rand_tensor(rng, &s, -3.0, 3.0)],
        Box::new(move |g, x| {
            let o = g.cos(x[0]);
            p(g, o)
        }),
    ));
    v.push((
        "exp",
        vec![rand_tensor(rng, &s, -2.0, 2.0)],
        Box::new(move |g, x| {
            let o = g.exp(x[0]);
            p(g, o)
        }),
    ));
    v.push((
        "concat",
        vec![rand_tensor(rng, &s, -1.0, 1.0), rand_tensor(rng, &[r, 3], -1.0, 1.0)],
        Box::new(move |g, x| {
            let o = g.concat(&[x[0], x[1]], 1)?;
            p(g, o)
        }),
    ));
    v.push((
        "slice",
        vec![rand_tensor(rng, &[r, c + 2], -1.0, 1.0)],
        Box::new(move |g, x| {
            let o = g.slice(x[0], 1, 1, c + 1)?;
            p(g, o)
        }),
    ));
    v.push((
        "sum",
        vec![rand_tensor(rng, &s, -1.0, 1.0)],
        Box::new(move |g, x| {
            let o = g.mul(x[0], x[0])?;
            Ok(g.sum(o))
        }),
    ));
    v.push((
        "sum_axis",
        vec![rand_tensor(rng, &s, -1.0, 1.0)],
        Box::new(move |g, x| {
            let o = g.sum_axis(x[0], 0)?;
            p(g, o)
        }),
    ));
    v.push((
        "mean",
        vec![rand_tensor(rng, &s, -1.0, 1.0)],
        Box::new(move |g, x| {
            let o = g.sin(x[0]);
            Ok(g.mean(o))
        }),
    ));
    v.push((
        "abs",
        vec![rand_away_from_zero(rng, &s)],
        Box::new(move |g, x| {
            let o = g.abs(x[0]);
            p(g, o)
        }),
    ));
    v.push((
        "log",
        vec![rand_tensor(rng, &s, 0.3, 3.0)],
        Box::new(move |g, x| {
            let o = g.log(x[0]);
            p(g, o)
        }),
    ));
    v.push((
        "power",
        vec![rand_tensor(rng, &s, 0.3, 2.0)],
        Box::new(move |g, x| {
            let o = g.power(x[0], 2.5);
            p(g, o)
        }),
    ));
    // keep probes away from the clamp corners
    let mut cl = rand_tensor(rng, &s, -0.4, 0.4);
    cl.data[0] = 0.9;
    v.push((
        "clamp",
        vec![cl],
        Box::new(move |g, x| {
            let o = g.clamp(x[0], -0.5, 0.5);
            p(g, o)
        }),
    ));
    v.push((
        "reshape",
        vec![rand_tensor(rng, &s, -1.0, 1.0)],
        Box::new(move |g, x| {
            let o = g.reshape(x[0], &[c, r])?;
            let o = g.sin(o);
            p(g, o)
        }),
    ));
    let idx: Vec<usize> = (0..4).map(|_| rng.gen_range(0..r)).collect();
    v.push((
        "gather_rows",
        vec![rand_tensor(rng, &s, -1.0, 1.0)],
        Box::new(move |g, x| {
            let o = g.gather_rows(x[0], &idx)?;
            p(g, o)
        }),
    ));
    v.push((
        "scatter_flat",
        vec![rand_tensor(rng, &[3], -1.0, 1.0)],
        Box::new(move |g, x| {
            let o = g.scatter_flat(x[0], &[5, 0, 2], &[2, 4])?;
            p(g, o)
        }),
    ));
    let dims = [rng.gen_range(2..4), rng.gen_range(2..4), rng.gen_range(2..4)];
    v.push((
        "trilinear_sample",
        vec![rand_tensor(rng, &[2, dims[0], dims[1], dims[2]], -1.0, 1.0), rand_tensor(rng, &[5, 3], 0.2, 0.8)],
        Box::new(move |g, x| {
            let o = g.trilinear_sample(x[0], x[1])?;
            p(g, o)
        }),
    ));
    v.push((
        "deform_aggregate",
        vec![rand_tensor(rng, &[3 * 2 * 2, 4], -1.0, 1.0), rand_tensor(rng, &[3, 4], 0.0, 1.0)],
        Box::new(move |g, x| {
            let o = g.deform_aggregate(x[0], x[1], 2)?;
            p(g, o)
        }),
    ));
    v.push((
        "conv3d",
        vec![rand_tensor(rng, &[2, 3, 2, 3], -1.0, 1.0), rand_tensor(rng, &[2, 2, 3, 3, 3], -0.5, 0.5)],
        Box::new(move |g, x| {
            let o = g.conv3d(x[0], x[1], 1)?;
            p(g, o)
        }),
    ));
    v.push((
        "conv3d_stride2",
        vec![rand_tensor(rng, &[2, 4, 3, 2], -1.0, 1.0), rand_tensor(rng, &[3, 2, 3, 3, 3], -0.5, 0.5)],
        Box::new(move |g, x| {
            let o = g.conv3d(x[0], x[1], 2)?;
            p(g, o)
        }),
    ));
    let rules = Arc::new(random_rulebook(rng, 7));
    v.push((
        "sparse_conv",
        vec![rand_tensor(rng, &[7, 3], -1.0, 1.0), rand_tensor(rng, &[2, 3, 3, 3, 3], -0.5, 0.5)],
        Box::new(move |g, x| {
            let o = g.sparse_conv(x[0], x[1], rules.clone())?;
            p(g, o)
        }),
    ));
    let jac_rows = 3;
    v.push((
        "row_function",
        vec![rand_tensor(rng, &[jac_rows, 2], -1.0, 1.0)],
        Box::new(move |g, x| {
            // f(a, b) = a² b per row
            let d = g.data(x[0]).to_vec();
            let vals: Vec<f64> = d.chunks(2).map(|r| r[0] * r[0] * r[1]).collect();
            let jac: Vec<f64> = d.chunks(2).flat_map(|r| [2.0 * r[0] * r[1], r[0] * r[0]]).collect();
            let o = g.row_function(x[0], vals, jac)?;
            p(g, o)
        }),
    ));
    v
}

/// Runs every primitive's finite-difference check for `rounds` random draws.
pub fn primitive_audit(seed: u64, rounds: usize) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: Vec<(&'static str, GradCheckReport)> = Vec::new();
    for _ in 0..rounds {
        for (name, inputs, f) in cases(&mut rng) {
            let rep = grad_check(&inputs, 1e-6, f)?;
            match worst.iter_mut().find(|(n, _)| *n == name) {
                Some((_, w)) if rep.max_rel_err > w.max_rel_err => *w = rep,
                Some(_) => {}
                None => worst.push((name, rep)),
            }
        }
    }
    Ok(worst)
}
