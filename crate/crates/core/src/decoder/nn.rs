use rand::Rng;

use crate::diff::{xavier_uniform, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;

/// Affine map `x·W + b` with `W [in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut impl Rng) -> Self {
        let w = xavier_uniform(&[din, dout], din, dout, rng);
        Self::with(store, name, w, Tensor::zeros(&[dout]))
    }

    pub fn with(store: &mut ParamStore, name: &str, w: Tensor, b: Tensor) -> Self {
        Linear { w: store.insert(format!("{name}.w"), w, true), b: store.insert(format!("{name}.b"), b, true) }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

/// Two-layer perceptron with a relu between.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, hidden: usize, dout: usize, rng: &mut impl Rng) -> Self {
        Mlp {
            l1: Linear::new(store, &format!("{name}.0"), din, hidden, rng),
            l2: Linear::new(store, &format!("{name}.1"), hidden, dout, rng),
        }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.l1.apply(g, store, x)?;
        let h = g.relu(h);
        self.l2.apply(g, store, h)
    }
}

/// Row-wise layer normalization with learned scale and shift.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.insert(format!("{name}.gamma"), Tensor::full(&[dim], 1.0), true),
            beta: store.insert(format!("{name}.beta"), Tensor::zeros(&[dim]), true),
        }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, 1e-5)?;
        let gm = g.param(store, self.gamma);
        let bt = g.param(store, self.beta);
        let n = g.mul(n, gm)?;
        g.add(n, bt)
    }
}
