use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

use super::nn::Linear;

/// Additive mask value for forbidden attention pairs; `exp` of it underflows
/// to exactly zero.
pub const MASK_NEG: f64 = -1e30;

/// Additive attention mask `[N, N]` for consecutive groups of the given
/// sizes: 0 inside a group, [`MASK_NEG`] across groups.
pub fn group_mask(sizes: &[usize]) -> Tensor {
    let n: usize = sizes.iter().sum();
    let mut group = Vec::with_capacity(n);
    for (gi, &s) in sizes.iter().enumerate() {
        group.extend(std::iter::repeat_n(gi, s));
    }
    let mut m = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            if group[i] != group[j] {
                m.data[i * n + j] = MASK_NEG;
            }
        }
    }
    m
}

/// Multi-head scaled dot-product self-attention.
#[derive(Clone, Copy, Debug)]
pub struct SelfAttn {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl SelfAttn {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        SelfAttn {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
        }
    }

    /// Queries and keys come from `qk`, values from `v`; `mask` is an
    /// additive `[N, N]` constant (or `None` for full attention).
    pub fn apply(&self, g: &mut Graph, store: &ParamStore, qk: Var, v: Var, mask: Option<Var>) -> Result<Var> {
        let d = g.shape(qk)[1];
        let dh = d / self.heads;
        let q = self.q.apply(g, store, qk)?;
        let k = self.k.apply(g, store, qk)?;
        let v = self.v.apply(g, store, v)?;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice(q, 1, h * dh, (h + 1) * dh)?;
            let kh = g.slice(k, 1, h * dh, (h + 1) * dh)?;
            let vh = g.slice(v, 1, h * dh, (h + 1) * dh)?;
            let kt = g.transpose(kh)?;
            let s = g.matmul(qh, kt)?;
            let mut s = g.scale(s, 1.0 / (dh as f64).sqrt());
            if let Some(m) = mask {
                s = g.add(s, m)?;
            }
            let a = g.softmax(s, 1)?;
            outs.push(g.matmul(a, vh)?);
        }
        let cat = g.concat(&outs, 1)?;
        self.o.apply(g, store, cat)
    }
}

/// Self-attention run independently inside each group of consecutive rows.
pub fn group_self_attn(g: &mut Graph, store: &ParamStore, attn: &SelfAttn, qk: Var, v: Var, sizes: &[usize]) -> Result<Var> {
    if sizes.len() == 1 {
        return attn.apply(g, store, qk, v, None);
    }
    let m = g.constant(group_mask(sizes));
    attn.apply(g, store, qk, v, Some(m))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeformAttnCfg {
    pub heads: usize,
    pub points: usize,
    pub dim: usize,
}

impl DeformAttnCfg {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.points == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads)));
        }
        Ok(())
    }
}

/// Deformable cross-attention into a feature volume around reference points.
#[derive(Clone, Copy, Debug)]
pub struct DeformAttn {
    pub cfg: DeformAttnCfg,
    /// Query → `H·K·3` sampling offsets, in voxels of the volume.
    pub offsets: Linear,
    /// Query → `H·K` attention logits.
    pub weights: Linear,
    /// Volume channels → `D`.
    pub value: Linear,
    pub out: Linear,
}

impl DeformAttn {
    pub fn new(store: &mut ParamStore, name: &str, cfg: DeformAttnCfg, vol_channels: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (h, k, d) = (cfg.heads, cfg.points, cfg.dim);
        // heads fan out over directions in the ground plane, points step outward
        let mut bias = Tensor::zeros(&[h * k * 3]);
        for hi in 0..h {
            let ang = 2.0 * PI * hi as f64 / h as f64;
            for ki in 0..k {
                let r = 0.5 * (ki + 1) as f64;
                let base = (hi * k + ki) * 3;
                bias.data[base] = r * ang.cos();
                bias.data[base + 1] = r * ang.sin();
            }
        }
        Ok(DeformAttn {
            cfg,
            offsets: Linear::with(store, &format!("{name}.offsets"), Tensor::zeros(&[d, h * k * 3]), bias),
            weights: Linear::with(store, &format!("{name}.weights"), Tensor::zeros(&[d, h * k]), Tensor::zeros(&[h * k])),
            value: Linear::new(store, &format!("{name}.value"), vol_channels, d, rng),
            out: Linear::new(store, &format!("{name}.out"), d, d, rng),
        })
    }

    /// Projects a volume `[C, X, Y, Z]` to `[D, X, Y, Z]` value features.
    pub fn project_volume(&self, g: &mut Graph, store: &ParamStore, volume: Var) -> Result<Var> {
        let s = g.shape(volume).to_vec();
        let cells = s[1] * s[2] * s[3];
        let flat = g.reshape(volume, &[s[0], cells])?;
        let rows = g.transpose(flat)?;
        let p = self.value.apply(g, store, rows)?;
        let back = g.transpose(p)?;
        g.reshape(back, &[self.cfg.dim, s[1], s[2], s[3]])
    }

    /// `query [Q, D]` (content plus positional embedding), `reference [Q, 3]`
    /// normalized to the volume, `values` from [`Self::project_volume`].
    pub fn apply(&self, g: &mut Graph, store: &ParamStore, query: Var, reference: Var, values: Var) -> Result<Var> {
        let (h, k) = (self.cfg.heads, self.cfg.points);
        let q = g.shape(query)[0];
        let vs = g.shape(values).to_vec();
        let off = self.offsets.apply(g, store, query)?;
        let off = g.reshape(off, &[q * h * k, 3])?;
        let unit = g.constant(Tensor::from_vec(vec![1.0 / vs[1] as f64, 1.0 / vs[2] as f64, 1.0 / vs[3] as f64]));
        let off = g.mul(off, unit)?;
        let rep: Vec<usize> = (0..q).flat_map(|i| std::iter::repeat_n(i, h * k)).collect();
        let refs = g.gather_rows(reference, &rep)?;
        let loc = g.add(refs, off)?;
        let samples = g.trilinear_sample(values, loc)?;
        let logits = self.weights.apply(g, store, query)?;
        let logits = g.reshape(logits, &[q * h, k])?;
        let w = g.softmax(logits, 1)?;
        let w = g.reshape(w, &[q, h * k])?;
        let agg = g.deform_aggregate(samples, w, h)?;
        self.out.apply(g, store, agg)
    }
}
