//! Hybrid feature extractor: sparse 3D convolution stages, densification,
//! then dense 3D convolution blocks producing the voxel feature volume.

mod rules;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{kaiming_uniform, Graph, ParamId, ParamStore, Rulebook, Tensor, Var};
use crate::error::{Error, Result};
use crate::pointops::{SparseVoxelTensor, VoxelGridSpec};

pub use rules::{downsample_rules, submanifold_rules, ConvKind};

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(default)]
pub struct BackboneConfig {
    /// Output channels of each sparse stage.
    pub sparse_channels: Vec<usize>,
    /// Stride of each sparse stage (1 = submanifold, 2 = regular downsample).
    pub sparse_strides: Vec<usize>,
    pub dense_blocks: usize,
    pub out_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { sparse_channels: vec![16, 32, 64, 64], sparse_strides: vec![1, 2, 1, 2], dense_blocks: 2, out_channels: 64 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sparse_channels.len() != self.sparse_strides.len() || self.sparse_channels.is_empty() {
            return Err(Error::Config("sparse_channels and sparse_strides must be non-empty and equal length".into()));
        }
        if self.sparse_strides.iter().any(|&s| s != 1 && s != 2) {
            return Err(Error::Config("sparse strides must be 1 or 2".into()));
        }
        if self.dense_blocks == 0 || self.out_channels == 0 || self.sparse_channels.contains(&0) {
            return Err(Error::Config("channel counts and dense_blocks must be positive".into()));
        }
        Ok(())
    }

    pub fn downsample_factor(&self) -> usize {
        1 << self.sparse_strides.iter().filter(|&&s| s == 2).count()
    }
}

/// Voxel feature volume `[C, X, Y, Z]` with the grid it lives on.
#[derive(Clone, Copy, Debug)]
pub struct DenseFeatureVolume {
    pub data: Var,
    pub spec: VoxelGridSpec,
}

/// Scene-dependent but weight-independent part of the sparse stages.
#[derive(Clone, Debug)]
pub struct SparsePlan {
    pub rules: Vec<Arc<Rulebook>>,
    /// Occupied sites after the last stage.
    pub coords: Vec<[u32; 3]>,
    pub spec: VoxelGridSpec,
}

/// Builds the rulebooks for every stage of `strides`.
pub fn plan_sparse(coords: &[[u32; 3]], spec: &VoxelGridSpec, strides: &[usize]) -> SparsePlan {
    let mut coords = coords.to_vec();
    let mut spec = *spec;
    let mut rules = Vec::with_capacity(strides.len());
    for &s in strides {
        if s == 2 {
            let (c, sp, r) = downsample_rules(&coords, &spec);
            coords = c;
            spec = sp;
            rules.push(Arc::new(r));
        } else {
            rules.push(Arc::new(submanifold_rules(&coords)));
        }
    }
    SparsePlan { rules, coords, spec }
}

/// One sparse convolution (no bias or normalization) on plain tensors;
/// `weights` is `[Cout, Cin, 3, 3, 3]`.
pub fn sparse_conv3d(input: &SparseVoxelTensor, kind: ConvKind, weights: &Tensor) -> Result<SparseVoxelTensor> {
    let (coords, spec, rules) = match kind {
        ConvKind::Submanifold => (input.coords.clone(), input.spec, submanifold_rules(&input.coords)),
        ConvKind::Regular => downsample_rules(&input.coords, &input.spec),
    };
    let mut g = Graph::new();
    let x = g.constant(Tensor { shape: vec![input.len(), input.feat_dim], data: input.feats.clone() });
    let w = g.constant(weights.clone());
    let y = g.sparse_conv(x, w, Arc::new(rules))?;
    let cout = weights.shape[0];
    Ok(SparseVoxelTensor { spec, coords, feat_dim: cout, feats: g.data(y).to_vec() })
}

/// Writes sparse rows `[N, C]` into a zero volume `[C, X, Y, Z]`.
pub fn sparse_to_dense(g: &mut Graph, feats: Var, coords: &[[u32; 3]], spec: &VoxelGridSpec) -> Result<DenseFeatureVolume> {
    let s = g.shape(feats).to_vec();
    if s.len() != 2 || s[0] != coords.len() {
        return Err(Error::Shape { op: "sparse_to_dense", lhs: s, rhs: vec![coords.len()] });
    }
    let c = s[1];
    let cells = spec.num_cells();
    let mut index = Vec::with_capacity(coords.len() * c);
    for co in coords {
        let lin = spec.linear(*co);
        index.extend((0..c).map(|ch| ch * cells + lin));
    }
    let [x, y, z] = spec.dims;
    let data = g.scatter_flat(feats, &index, &[c, x, y, z])?;
    Ok(DenseFeatureVolume { data, spec: *spec })
}

/// Plain-tensor densification of a sparse tensor.
pub fn densify(t: &SparseVoxelTensor) -> Tensor {
    let cells = t.spec.num_cells();
    let mut data = vec![0.0; t.feat_dim * cells];
    for (i, co) in t.coords.iter().enumerate() {
        let lin = t.spec.linear(*co);
        for (ch, v) in t.feat(i).iter().enumerate() {
            data[ch * cells + lin] = *v;
        }
    }
    let [x, y, z] = t.spec.dims;
    Tensor { shape: vec![t.feat_dim, x, y, z], data }
}

/// Reads the rows at `coords` back out of a dense volume.
pub fn dense_to_sparse(volume: &Tensor, coords: &[[u32; 3]], spec: &VoxelGridSpec) -> SparseVoxelTensor {
    let c = volume.shape[0];
    let cells = spec.num_cells();
    let mut feats = Vec::with_capacity(coords.len() * c);
    for co in coords {
        let lin = spec.linear(*co);
        feats.extend((0..c).map(|ch| volume.data[ch * cells + lin]));
    }
    SparseVoxelTensor { spec: *spec, coords: coords.to_vec(), feat_dim: c, feats }
}

/// Normalizes each column of `[N, C]` over its `N` rows, then applies a
/// per-channel affine map.
pub fn channel_norm_rows(g: &mut Graph, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let t = g.transpose(x)?;
    let n = g.layer_norm(t, NORM_EPS)?;
    let n = g.transpose(n)?;
    let n = g.mul(n, gamma)?;
    g.add(n, beta)
}

/// Parameters of one convolution + normalization + relu unit.
#[derive(Clone, Copy, Debug)]
pub struct ConvUnit {
    pub weight: ParamId,
    pub bias: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl ConvUnit {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let w = kaiming_uniform(&[cout, cin, 3, 3, 3], cin * 27, rng);
        ConvUnit {
            weight: store.insert(format!("{name}.weight"), w, true),
            bias: store.insert(format!("{name}.bias"), Tensor::zeros(&[cout]), true),
            gamma: store.insert(format!("{name}.gamma"), Tensor::full(&[cout], 1.0), true),
            beta: store.insert(format!("{name}.beta"), Tensor::zeros(&[cout]), true),
        }
    }
}

/// Dense 3³ convolution + bias, optional per-channel normalization, relu.
pub fn dense_conv3d_block(g: &mut Graph, store: &ParamStore, volume: Var, unit: &ConvUnit, normalize: bool) -> Result<Var> {
    let w = g.param(store, unit.weight);
    let y = g.conv3d(volume, w, 1)?;
    let s = g.shape(y).to_vec();
    let (c, cells) = (s[0], s[1] * s[2] * s[3]);
    let flat = g.reshape(y, &[c, cells])?;
    let rows = g.transpose(flat)?;
    let b = g.param(store, unit.bias);
    let mut rows = g.add(rows, b)?;
    if normalize {
        let gm = g.param(store, unit.gamma);
        let bt = g.param(store, unit.beta);
        rows = channel_norm_rows(g, rows, gm, bt)?;
    }
    let rows = g.relu(rows);
    let back = g.transpose(rows)?;
    g.reshape(back, &s)
}

/// The extractor's parameters.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub in_channels: usize,
    pub sparse: Vec<ConvUnit>,
    pub dense: Vec<ConvUnit>,
}

impl Backbone {
    /// `in_channels` counts the voxel features plus the occupancy channel.
    pub fn new(cfg: &BackboneConfig, in_channels: usize, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut cin = in_channels;
        let mut sparse = Vec::new();
        for (i, &cout) in cfg.sparse_channels.iter().enumerate() {
            sparse.push(ConvUnit::new(store, &format!("backbone.sparse{i}"), cin, cout, rng));
            cin = cout;
        }
        let mut dense = Vec::new();
        for i in 0..cfg.dense_blocks {
            dense.push(ConvUnit::new(store, &format!("backbone.dense{i}"), cin, cfg.out_channels, rng));
            cin = cfg.out_channels;
        }
        Ok(Backbone { cfg: cfg.clone(), in_channels, sparse, dense })
    }

    pub fn plan(&self, scene: &SparseVoxelTensor) -> SparsePlan {
        plan_sparse(&scene.coords, &scene.spec, &self.cfg.sparse_strides)
    }

    /// Input rows: voxel features followed by a constant occupancy 1.
    fn input_rows(&self, scene: &SparseVoxelTensor) -> Result<Tensor> {
        if scene.feat_dim + 1 != self.in_channels {
            return Err(Error::Shape { op: "extract_features", lhs: vec![scene.feat_dim + 1], rhs: vec![self.in_channels] });
        }
        let mut data = Vec::with_capacity(scene.len() * self.in_channels);
        for i in 0..scene.len() {
            data.extend_from_slice(scene.feat(i));
            data.push(1.0);
        }
        Ok(Tensor { shape: vec![scene.len(), self.in_channels], data })
    }

    /// Sparse stages → densify → dense blocks.
    pub fn extract_features(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        scene: &SparseVoxelTensor,
        plan: &SparsePlan,
    ) -> Result<DenseFeatureVolume> {
        let c_last = *self.cfg.sparse_channels.last().unwrap();
        let vol = if scene.is_empty() {
            let [x, y, z] = plan.spec.dims;
            g.constant(Tensor::zeros(&[c_last, x, y, z]))
        } else {
            let mut h = g.constant(self.input_rows(scene)?);
            for (unit, rules) in self.sparse.iter().zip(&plan.rules) {
                let w = g.param(store, unit.weight);
                let b = g.param(store, unit.bias);
                let gm = g.param(store, unit.gamma);
                let bt = g.param(store, unit.beta);
                h = g.sparse_conv(h, w, rules.clone())?;
                h = g.add(h, b)?;
                h = channel_norm_rows(g, h, gm, bt)?;
                h = g.relu(h);
            }
            sparse_to_dense(g, h, &plan.coords, &plan.spec)?.data
        };
        let mut v = vol;
        for unit in &self.dense {
            v = dense_conv3d_block(g, store, v, unit, true)?;
        }
        Ok(DenseFeatureVolume { data: v, spec: plan.spec })
    }
}

#[cfg(test)]
mod tests;
