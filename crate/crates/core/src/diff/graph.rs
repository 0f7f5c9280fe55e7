//! Reverse-mode computation graph.
//!
//! A [`Graph`] owns every intermediate value of one forward pass. Ops append
//! nodes in execution order, so the node list is already topologically sorted
//! and [`Graph::backward`] is a single reverse sweep.
//!
//! Broadcasting is restricted to trailing-dimension alignment: in a binary op
//! the smaller operand's shape must be a suffix of the larger one's (a scalar
//! has the empty shape and broadcasts everywhere).

use std::sync::Arc;

use crate::error::{Error, Result};

use super::kernels::{self, gemm, Rulebook};
use super::params::{ParamId, ParamStore};
use super::tensor::{split_axis, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// right operand repeats over the left's leading dims
    Right,
    Left,
}

enum Op {
    Leaf,
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Div(Var, Var, Bcast),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Relu(Var),
    Sigmoid(Var),
    Sin(Var),
    Cos(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Pow(Var, f64),
    Clamp(Var, f64, f64),
    Softmax(Var, usize),
    LayerNorm(Var, Vec<f64>),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Sum(Var),
    SumAxis(Var, usize),
    Mean(Var),
    GatherRows(Var, Vec<usize>),
    ScatterFlat(Var, Vec<usize>),
    RowJacobian(Var, Vec<f64>),
    Trilinear(Var, Var),
    DeformAggregate(Var, Var, usize),
    Conv3d(Var, Var, usize, Vec<f64>),
    SparseConv(Var, Var, Arc<Rulebook>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Gradients produced by [`Graph::backward`]. Only nodes that require a
/// gradient have an entry.
pub struct Gradients {
    by_node: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.by_node.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of each parameter leaf, in registration order. A parameter
    /// registered more than once has its contributions summed.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        let mut out: Vec<(ParamId, Vec<f64>)> = Vec::new();
        for &(pid, node) in &self.params {
            let Some(g) = self.by_node[node].as_ref() else {
                continue;
            };
            match out.iter_mut().find(|(p, _)| *p == pid) {
                Some((_, acc)) => {
                    for (a, b) in acc.iter_mut().zip(g) {
                        *a += b;
                    }
                }
                None => out.push((pid, g.clone())),
            }
        }
        out
    }
}

/// Computation graph for one forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    differentiated: bool,
}

fn suffix_of(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Registers a parameter as a leaf; frozen parameters become constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id).clone();
        let v = self.push(t, Op::Leaf, store.is_trainable(id));
        self.nodes[v.0].param = Some(id);
        v
    }

    /// Copies a value out as a constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var) -> Result<(Bcast, Vec<usize>)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            Ok((Bcast::Same, sa.to_vec()))
        } else if suffix_of(sb, sa) {
            Ok((Bcast::Right, sa.to_vec()))
        } else if suffix_of(sa, sb) {
            Ok((Bcast::Left, sb.to_vec()))
        } else {
            Err(Error::Shape { op: name, lhs: sa.to_vec(), rhs: sb.to_vec() })
        }
    }

    fn zip_with(&self, a: Var, b: Var, bc: Bcast, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let da = self.data(a);
        let db = self.data(b);
        match bc {
            Bcast::Same => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Right => {
                let n = db.len();
                da.iter().enumerate().map(|(i, &x)| f(x, db[i % n])).collect()
            }
            Bcast::Left => {
                let n = da.len();
                db.iter().enumerate().map(|(i, &y)| f(da[i % n], y)).collect()
            }
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (bc, shape) = self.binary("add", a, b)?;
        let data = self.zip_with(a, b, bc, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b, bc), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (bc, shape) = self.binary("sub", a, b)?;
        let data = self.zip_with(a, b, bc, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, Op::Sub(a, b, bc), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (bc, shape) = self.binary("mul", a, b)?;
        let data = self.zip_with(a, b, bc, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, Op::Mul(a, b, bc), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (bc, shape) = self.binary("div", a, b)?;
        let data = self.zip_with(a, b, bc, |x, y| x / y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, Op::Div(a, b, bc), rg))
    }

    /// `c * a` for a constant `c`.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let t = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|x| x * c).collect() };
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let t = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|x| x + c).collect() };
        let rg = self.rg(a);
        self.push(t, Op::Offset(a), rg)
    }

    /// `[m, k] · [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape { op: "matmul", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, self.data(a), k, 1, self.data(b), n, 1, 0.0, &mut out, n, 1);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::Shape { op: "transpose", lhs: s.to_vec(), rhs: vec![] });
        }
        let (r, c) = (s[0], s[1]);
        let d = self.data(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape: vec![c, r], data: out }, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).numel() {
            return Err(Error::Shape { op: "reshape", lhs: self.shape(a).to_vec(), rhs: shape.to_vec() });
        }
        let t = Tensor { shape: shape.to_vec(), data: self.data(a).to_vec() };
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let t = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|&x| f(x)).collect() };
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, f64::sin, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, f64::cos, Op::Cos(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// `a^p` for a constant exponent.
    pub fn power(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, move |x| x.powf(p), Op::Pow(a, p))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, move |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(Error::Shape { op: "softmax", lhs: s, rhs: vec![axis] });
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let d = self.data(a);
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let mx = (0..len).map(|k| d[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = (d[at(k)] - mx).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[at(k)] /= z;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape: s, data: out }, Op::Softmax(a, axis), rg))
    }

    /// Normalizes over the last axis to zero mean, unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let Some(&n) = s.last() else {
            return Err(Error::Shape { op: "layer_norm", lhs: s, rhs: vec![] });
        };
        if n == 0 {
            return Err(Error::Shape { op: "layer_norm", lhs: s, rhs: vec![] });
        }
        let d = self.data(a);
        let rows = d.len() / n;
        let mut out = vec![0.0; d.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let x = &d[r * n..(r + 1) * n];
            let mean = x.iter().sum::<f64>() / n as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for (o, v) in out[r * n..(r + 1) * n].iter_mut().zip(x) {
                *o = (v - mean) * rs;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape: s, data: out }, Op::LayerNorm(a, rstd), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Shape { op: "concat", lhs: vec![], rhs: vec![] });
        };
        let s0 = self.shape(first).to_vec();
        if axis >= s0.len() {
            return Err(Error::Shape { op: "concat", lhs: s0, rhs: vec![axis] });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == s0.len() && (0..s.len()).all(|i| i == axis || s[i] == s0[i]);
            if !ok {
                return Err(Error::Shape { op: "concat", lhs: s0, rhs: s.to_vec() });
            }
            total += s[axis];
        }
        let mut shape = s0.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let d = self.data(p);
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor { shape, data: out }, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// `a[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start > end || end > s[axis] {
            return Err(Error::Shape { op: "slice", lhs: s, rhs: vec![axis, start, end] });
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let d = self.data(a);
        let w = end - start;
        let mut out = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut shape = s;
        shape[axis] = w;
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape, data: out }, Op::Slice(a, axis, start), rg))
    }

    /// Sum of all elements, rank-0 result.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let s = d.iter().sum::<f64>() / d.len().max(1) as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Sums out `axis`.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(Error::Shape { op: "sum_axis", lhs: s, rhs: vec![axis] });
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let d = self.data(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += d[(o * len + k) * inner + i];
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape, data: out }, Op::SumAxis(a, axis), rg))
    }

    /// Selects rows (first-axis slabs) by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.is_empty() || index.iter().any(|&i| i >= s[0]) {
            return Err(Error::Shape { op: "gather_rows", lhs: s, rhs: index.to_vec() });
        }
        let row: usize = s[1..].iter().product();
        let d = self.data(a);
        let mut out = Vec::with_capacity(index.len() * row);
        for &i in index {
            out.extend_from_slice(&d[i * row..(i + 1) * row]);
        }
        let mut shape = s;
        shape[0] = index.len();
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape, data: out }, Op::GatherRows(a, index.to_vec()), rg))
    }

    /// Zero tensor of `shape` with `src[j]` written at flat position `index[j]`.
    pub fn scatter_flat(&mut self, src: Var, index: &[usize], shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        let d = self.data(src);
        if d.len() != index.len() || index.iter().any(|&i| i >= n) {
            return Err(Error::Shape { op: "scatter_flat", lhs: self.shape(src).to_vec(), rhs: shape.to_vec() });
        }
        let mut out = vec![0.0; n];
        for (&i, &v) in index.iter().zip(d) {
            out[i] += v;
        }
        let rg = self.rg(src);
        Ok(self.push(Tensor { shape: shape.to_vec(), data: out }, Op::ScatterFlat(src, index.to_vec()), rg))
    }

    /// Row-wise scalar function with a precomputed Jacobian: `a` is `[M, P]`,
    /// `values` has `M` entries and `jac` is `M × P` with `∂value_m/∂a[m, p]`.
    pub fn row_function(&mut self, a: Var, values: Vec<f64>, jac: Vec<f64>) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || values.len() != s[0] || jac.len() != s[0] * s[1] {
            return Err(Error::Shape { op: "row_function", lhs: s, rhs: vec![values.len(), jac.len()] });
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_vec(values), Op::RowJacobian(a, jac), rg))
    }

    /// Trilinear sampling of `volume [C, X, Y, Z]` at normalized points
    /// `[M, 3]` in `[0,1]³`, giving `[M, C]`. Voxel `i` along an axis of
    /// extent `n` is centered at `(i + 0.5) / n`; points beyond the outer
    /// centers clamp to the border.
    pub fn trilinear_sample(&mut self, volume: Var, points: Var) -> Result<Var> {
        let sv = self.shape(volume).to_vec();
        let sp = self.shape(points).to_vec();
        if sv.len() != 4 || sp.len() != 2 || sp[1] != 3 {
            return Err(Error::Shape { op: "trilinear_sample", lhs: sv, rhs: sp });
        }
        let dims = [sv[1], sv[2], sv[3]];
        let out = kernels::trilinear_forward(self.data(volume), sv[0], dims, self.data(points));
        let rg = self.rg(volume) || self.rg(points);
        Ok(self.push(Tensor { shape: vec![sp[0], sv[0]], data: out }, Op::Trilinear(volume, points), rg))
    }

    /// Deformable-attention aggregation.
    ///
    /// `samples` is `[Q·H·K, C]` (row `(q·H + h)·K + k` holds the features
    /// sampled for query `q`, head `h`, point `k`), `weights` is `[Q, H·K]`.
    /// Output `[Q, C]`: channel block `h` of query `q` is
    /// `Σ_k weights[q, h·K + k] · samples[(q·H + h)·K + k, block h]`.
    pub fn deform_aggregate(&mut self, samples: Var, weights: Var, heads: usize) -> Result<Var> {
        let ss = self.shape(samples).to_vec();
        let sw = self.shape(weights).to_vec();
        let bad = ss.len() != 2
            || sw.len() != 2
            || heads == 0
            || !sw[1].is_multiple_of(heads)
            || !ss[1].is_multiple_of(heads)
            || ss[0] != sw[0] * sw[1];
        if bad {
            return Err(Error::Shape { op: "deform_aggregate", lhs: ss, rhs: sw });
        }
        let (q, c) = (sw[0], ss[1]);
        let k = sw[1] / heads;
        let dh = c / heads;
        let s = self.data(samples);
        let w = self.data(weights);
        let mut out = vec![0.0; q * c];
        for qi in 0..q {
            for h in 0..heads {
                for ki in 0..k {
                    let wt = w[qi * heads * k + h * k + ki];
                    let row = ((qi * heads + h) * k + ki) * c;
                    for j in h * dh..(h + 1) * dh {
                        out[qi * c + j] += wt * s[row + j];
                    }
                }
            }
        }
        let rg = self.rg(samples) || self.rg(weights);
        Ok(self.push(Tensor { shape: vec![q, c], data: out }, Op::DeformAggregate(samples, weights, heads), rg))
    }

    /// Dense 3³ convolution with padding 1: `x [Cin, X, Y, Z]`,
    /// `w [Cout, Cin, 3, 3, 3]`, stride 1 or 2.
    pub fn conv3d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 5 || sw[1] != sx[0] || sw[2..] != [3, 3, 3] || !(stride == 1 || stride == 2) {
            return Err(Error::Shape { op: "conv3d", lhs: sx, rhs: sw });
        }
        let cin = sx[0];
        let cout = sw[0];
        let (cols, od) = kernels::im2col3(self.data(x), cin, [sx[1], sx[2], sx[3]], stride);
        let so: usize = od.iter().product();
        let mut out = vec![0.0; cout * so];
        gemm(cout, cin * 27, so, 1.0, self.data(w), cin * 27, 1, &cols, so, 1, 0.0, &mut out, so, 1);
        let rg = self.rg(x) || self.rg(w);
        let t = Tensor { shape: vec![cout, od[0], od[1], od[2]], data: out };
        Ok(self.push(t, Op::Conv3d(x, w, stride, cols), rg))
    }

    /// Sparse 3³ convolution following a prebuilt rulebook: `x [N_in, Cin]`,
    /// `w [Cout, Cin, 3, 3, 3]` → `[N_out, Cout]`.
    pub fn sparse_conv(&mut self, x: Var, w: Var, rules: Arc<Rulebook>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 2 || sw.len() != 5 || sw[1] != sx[1] || sw[2..] != [3, 3, 3] || sx[0] != rules.n_in {
            return Err(Error::Shape { op: "sparse_conv", lhs: sx, rhs: sw });
        }
        let (cin, cout) = (sx[1], sw[0]);
        let out = kernels::sparse_conv_forward(self.data(x), cin, self.data(w), cout, &rules);
        let rg = self.rg(x) || self.rg(w);
        let t = Tensor { shape: vec![rules.n_out, cout], data: out };
        Ok(self.push(t, Op::SparseConv(x, w, rules), rg))
    }

    /// Clears the "already differentiated" mark so `backward` may run again.
    pub fn reset_backward(&mut self) {
        self.differentiated = false;
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.differentiated {
            return Err(Error::Backward("graph already differentiated; call reset_backward first".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Backward(format!("loss must be scalar, got shape {:?}", self.shape(loss))));
        }
        self.differentiated = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[id] = None;
            } else if grads[id].is_none() && id <= loss.0 {
                grads[id] = Some(vec![0.0; node.value.numel()]);
            }
        }
        let params = self.nodes.iter().enumerate().filter_map(|(i, nd)| nd.param.filter(|_| nd.requires_grad).map(|p| (p, i))).collect();
        Ok(Gradients { by_node: grads, params })
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = &node.value.data;
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot);
        };
        let val = |v: Var| &nodes[v.0].value.data;

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(*a, &mut |ga| reduce_into(ga, g, *bc == Bcast::Left, 1.0));
                acc(*b, &mut |gb| reduce_into(gb, g, *bc == Bcast::Right, sign));
            }
            Op::Mul(a, b, bc) => {
                let (va, vb) = (val(*a), val(*b));
                let ga_full: Vec<f64> = (0..g.len()).map(|i| g[i] * bidx(vb, i, *bc, false)).collect();
                let gb_full: Vec<f64> = (0..g.len()).map(|i| g[i] * bidx(va, i, *bc, true)).collect();
                acc(*a, &mut |ga| reduce_into(ga, &ga_full, *bc == Bcast::Left, 1.0));
                acc(*b, &mut |gb| reduce_into(gb, &gb_full, *bc == Bcast::Right, 1.0));
            }
            Op::Div(a, b, bc) => {
                let (va, vb) = (val(*a), val(*b));
                let ga_full: Vec<f64> = (0..g.len()).map(|i| g[i] / bidx(vb, i, *bc, false)).collect();
                let gb_full: Vec<f64> = (0..g.len())
                    .map(|i| {
                        let y = bidx(vb, i, *bc, false);
                        -g[i] * bidx(va, i, *bc, true) / (y * y)
                    })
                    .collect();
                acc(*a, &mut |ga| reduce_into(ga, &ga_full, *bc == Bcast::Left, 1.0));
                acc(*b, &mut |gb| reduce_into(gb, &gb_full, *bc == Bcast::Right, 1.0));
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| axpy(ga, g, *c)),
            Op::Offset(a) | Op::Reshape(a) => acc(*a, &mut |ga| axpy(ga, g, 1.0)),
            Op::MatMul(a, b) => {
                let sa = &nodes[a.0].value.shape;
                let sb = &nodes[b.0].value.shape;
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (val(*a), val(*b));
                // dA = G·Bᵀ, dB = Aᵀ·G
                acc(*a, &mut |ga| gemm(m, n, k, 1.0, g, n, 1, vb, 1, n, 1.0, ga, k, 1));
                acc(*b, &mut |gb| gemm(k, m, n, 1.0, va, 1, k, g, n, 1, 1.0, gb, n, 1));
            }
            Op::Transpose(a) => {
                let s = &nodes[a.0].value.shape;
                let (r, c) = (s[0], s[1]);
                acc(*a, &mut |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let va = val(*a);
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        if va[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => acc(*a, &mut |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * out[i] * (1.0 - out[i]);
                }
            }),
            Op::Sin(a) => {
                let va = val(*a);
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * va[i].cos();
                    }
                });
            }
            Op::Cos(a) => {
                let va = val(*a);
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] -= g[i] * va[i].sin();
                    }
                });
            }
            Op::Exp(a) => acc(*a, &mut |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * out[i];
                }
            }),
            Op::Log(a) => {
                let va = val(*a);
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] / va[i];
                    }
                });
            }
            Op::Abs(a) => {
                let va = val(*a);
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        let s = if va[i] > 0.0 {
                            1.0
                        } else if va[i] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        ga[i] += g[i] * s;
                    }
                });
            }
            Op::Pow(a, p) => {
                let va = val(*a);
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        if *p != 0.0 {
                            let d = if *p == 1.0 { 1.0 } else { p * va[i].powf(p - 1.0) };
                            ga[i] += g[i] * d;
                        }
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let va = val(*a);
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        if va[i] >= *lo && va[i] <= *hi {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = split_axis(&node.value.shape, *axis);
                acc(*a, &mut |ga| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * len + k) * inner + i;
                            let dot: f64 = (0..len).map(|k| g[at(k)] * out[at(k)]).sum();
                            for k in 0..len {
                                ga[at(k)] += out[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm(a, rstd) => {
                let n = *node.value.shape.last().unwrap();
                acc(*a, &mut |ga| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gy = &g[r * n..(r + 1) * n];
                        let y = &out[r * n..(r + 1) * n];
                        let mg = gy.iter().sum::<f64>() / n as f64;
                        let mgy = gy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            ga[r * n + j] += rs * (gy[j] - mg - y[j] * mgy);
                        }
                    }
                });
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = split_axis(&node.value.shape, *axis);
                let mut start = 0;
                for p in parts {
                    let len = nodes[p.0].value.shape[*axis];
                    acc(*p, &mut |gp| {
                        for o in 0..outer {
                            let src = &g[(o * total + start) * inner..(o * total + start + len) * inner];
                            axpy(&mut gp[o * len * inner..(o + 1) * len * inner], src, 1.0);
                        }
                    });
                    start += len;
                }
            }
            Op::Slice(a, axis, start) => {
                let (outer, len, inner) = split_axis(&nodes[a.0].value.shape, *axis);
                let w = node.value.shape[*axis];
                acc(*a, &mut |ga| {
                    for o in 0..outer {
                        let dst = &mut ga[(o * len + start) * inner..(o * len + start + w) * inner];
                        axpy(dst, &g[o * w * inner..(o + 1) * w * inner], 1.0);
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => acc(*a, &mut |ga| {
                let s = g[0] / ga.len().max(1) as f64;
                ga.iter_mut().for_each(|x| *x += s);
            }),
            Op::SumAxis(a, axis) => {
                let (outer, len, inner) = split_axis(&nodes[a.0].value.shape, *axis);
                acc(*a, &mut |ga| {
                    for o in 0..outer {
                        for k in 0..len {
                            for i in 0..inner {
                                ga[(o * len + k) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::GatherRows(a, index) => {
                let row = node.value.numel() / index.len().max(1);
                acc(*a, &mut |ga| {
                    for (j, &i) in index.iter().enumerate() {
                        axpy(&mut ga[i * row..(i + 1) * row], &g[j * row..(j + 1) * row], 1.0);
                    }
                });
            }
            Op::ScatterFlat(a, index) => acc(*a, &mut |ga| {
                for (j, &i) in index.iter().enumerate() {
                    ga[j] += g[i];
                }
            }),
            Op::RowJacobian(a, jac) => {
                let p = nodes[a.0].value.shape[1];
                acc(*a, &mut |ga| {
                    for (m, &gm) in g.iter().enumerate() {
                        for j in 0..p {
                            ga[m * p + j] += gm * jac[m * p + j];
                        }
                    }
                });
            }
            Op::Trilinear(vol, pts) => {
                let sv = &nodes[vol.0].value.shape;
                let dims = [sv[1], sv[2], sv[3]];
                let c = sv[0];
                let (vv, vp) = (val(*vol), val(*pts));
                acc(*vol, &mut |gv| kernels::trilinear_backward(vv, c, dims, vp, g, Some(gv), None));
                acc(*pts, &mut |gp| kernels::trilinear_backward(vv, c, dims, vp, g, None, Some(gp)));
            }
            Op::DeformAggregate(samples, weights, heads) => {
                let sw = &nodes[weights.0].value.shape;
                let c = node.value.shape[1];
                let (q, heads) = (sw[0], *heads);
                let k = sw[1] / heads;
                let dh = c / heads;
                let (vs, vw) = (val(*samples), val(*weights));
                acc(*samples, &mut |gs| {
                    for qi in 0..q {
                        for h in 0..heads {
                            for ki in 0..k {
                                let wt = vw[qi * heads * k + h * k + ki];
                                let row = ((qi * heads + h) * k + ki) * c;
                                for j in h * dh..(h + 1) * dh {
                                    gs[row + j] += wt * g[qi * c + j];
                                }
                            }
                        }
                    }
                });
                acc(*weights, &mut |gw| {
                    for qi in 0..q {
                        for h in 0..heads {
                            for ki in 0..k {
                                let row = ((qi * heads + h) * k + ki) * c;
                                let mut s = 0.0;
                                for j in h * dh..(h + 1) * dh {
                                    s += vs[row + j] * g[qi * c + j];
                                }
                                gw[qi * heads * k + h * k + ki] += s;
                            }
                        }
                    }
                });
            }
            Op::Conv3d(x, w, stride, cols) => {
                let sx = &nodes[x.0].value.shape;
                let cin = sx[0];
                let cout = node.value.shape[0];
                let so: usize = node.value.shape[1..].iter().product();
                let vw = val(*w);
                acc(*w, &mut |gw| gemm(cout, so, cin * 27, 1.0, g, so, 1, cols, 1, so, 1.0, gw, cin * 27, 1));
                acc(*x, &mut |gx| {
                    let mut dcols = vec![0.0; cin * 27 * so];
                    gemm(cin * 27, cout, so, 1.0, vw, 1, cin * 27, g, so, 1, 0.0, &mut dcols, so, 1);
                    kernels::col2im3(&dcols, cin, [sx[1], sx[2], sx[3]], *stride, gx);
                });
            }
            Op::SparseConv(x, w, rules) => {
                let cin = nodes[x.0].value.shape[1];
                let cout = node.value.shape[1];
                let (vx, vw) = (val(*x), val(*w));
                acc(*w, &mut |gw| kernels::sparse_conv_backward(vx, cin, vw, cout, rules, g, None, Some(gw)));
                acc(*x, &mut |gx| kernels::sparse_conv_backward(vx, cin, vw, cout, rules, g, Some(gx), None));
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Element of operand `v` aligned with output position `i`.
#[inline]
fn bidx(v: &[f64], i: usize, bc: Bcast, left: bool) -> f64 {
    let small = match bc {
        Bcast::Same => false,
        Bcast::Right => !left,
        Bcast::Left => left,
    };
    if small {
        v[i % v.len()]
    } else {
        v[i]
    }
}

/// Adds `sign * g` into `dst`, folding over leading dims when `dst` is the
/// broadcast operand.
fn reduce_into(dst: &mut [f64], g: &[f64], broadcast: bool, sign: f64) {
    if broadcast {
        let n = dst.len();
        for (i, &x) in g.iter().enumerate() {
            dst[i % n] += sign * x;
        }
    } else {
        axpy(dst, g, sign);
    }
}

#[inline]
fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}
