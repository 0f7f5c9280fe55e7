use std::collections::{BTreeMap, HashMap};

use super::cloud::{PointCloud, VoxelGridSpec};

/// Occupied voxels with one feature row each, sorted by coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseVoxelTensor {
    pub spec: VoxelGridSpec,
    pub coords: Vec<[u32; 3]>,
    pub feat_dim: usize,
    /// Row-major `[coords.len(), feat_dim]`.
    pub feats: Vec<f64>,
}

impl SparseVoxelTensor {
    pub fn empty(spec: VoxelGridSpec, feat_dim: usize) -> Self {
        SparseVoxelTensor { spec, coords: Vec::new(), feat_dim, feats: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn feat(&self, i: usize) -> &[f64] {
        &self.feats[i * self.feat_dim..(i + 1) * self.feat_dim]
    }

    pub fn index_map(&self) -> HashMap<[u32; 3], usize> {
        self.coords.iter().enumerate().map(|(i, &c)| (c, i)).collect()
    }
}

/// Dynamic voxelization: every in-grid point contributes to its cell, with
/// no per-cell budget.
///
/// Voxel features are the mean point feature followed by the mean offset of
/// the points from the cell center in voxel units. The second result holds
/// one point per occupied cell at the mean of its members, carrying their
/// mean feature. Points outside the grid are dropped; an all-outside cloud
/// yields an empty tensor and a warning.
pub fn voxelize(cloud: &PointCloud, spec: &VoxelGridSpec) -> (SparseVoxelTensor, PointCloud) {
    let f = cloud.feat_dim;
    // per cell: count, Σ position, Σ features
    let mut cells: BTreeMap<[u32; 3], (usize, [f64; 3], Vec<f64>)> = BTreeMap::new();
    for (i, p) in cloud.points.iter().enumerate() {
        let Some(c) = spec.cell_of(p) else { continue };
        let e = cells.entry(c).or_insert_with(|| (0, [0.0; 3], vec![0.0; f]));
        e.0 += 1;
        for (s, v) in e.1.iter_mut().zip(p) {
            *s += v;
        }
        for (s, v) in e.2.iter_mut().zip(cloud.feature(i)) {
            *s += v;
        }
    }
    if cells.is_empty() {
        log::warn!("voxelize: none of {} points fall inside the grid", cloud.len());
    }

    let dim = f + 3;
    let mut out = SparseVoxelTensor::empty(*spec, dim);
    let mut vcloud = PointCloud { points: Vec::with_capacity(cells.len()), feat_dim: f, features: Vec::new() };
    for (c, (n, sp, sf)) in cells {
        let n = n as f64;
        let mean = sp.map(|v| v / n);
        let ctr = spec.center(c);
        out.coords.push(c);
        out.feats.extend(sf.iter().map(|v| v / n));
        out.feats.extend((0..3).map(|a| (mean[a] - ctr[a]) / spec.voxel_size[a]));
        vcloud.points.push(mean);
        vcloud.features.extend(sf.iter().map(|v| v / n));
    }
    (out, vcloud)
}
