use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points with an optional fixed-width feature vector per point.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub feat_dim: usize,
    /// Row-major `[points.len(), feat_dim]`.
    pub features: Vec<f64>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>, feat_dim: usize, features: Vec<f64>) -> Result<Self> {
        let c = PointCloud { points, feat_dim, features };
        c.validate()?;
        Ok(c)
    }

    pub fn from_points(points: Vec<[f64; 3]>) -> Self {
        PointCloud { points, feat_dim: 0, features: Vec::new() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.len() != self.points.len() * self.feat_dim {
            return Err(Error::Shape { op: "point_cloud", lhs: vec![self.points.len(), self.feat_dim], rhs: vec![self.features.len()] });
        }
        if let Some(i) = self.points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidBox(format!("point {i} has a non-finite coordinate")));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidBox("non-finite point feature".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.feat_dim..(i + 1) * self.feat_dim]
    }

    pub fn centroid(&self) -> Option<[f64; 3]> {
        if self.points.is_empty() {
            return None;
        }
        let mut c = [0.0; 3];
        for p in &self.points {
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        let n = self.points.len() as f64;
        Some(c.map(|v| v / n))
    }
}

/// Regular axis-aligned voxel grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoxelGridSpec {
    pub origin: [f64; 3],
    pub voxel_size: [f64; 3],
    pub dims: [usize; 3],
}

impl VoxelGridSpec {
    pub fn new(origin: [f64; 3], voxel_size: [f64; 3], dims: [usize; 3]) -> Result<Self> {
        let s = VoxelGridSpec { origin, voxel_size, dims };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.voxel_size.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidGrid(format!("voxel size {:?} must be positive", self.voxel_size)));
        }
        if self.dims.contains(&0) {
            return Err(Error::InvalidGrid(format!("dims {:?} must be at least 1", self.dims)));
        }
        if self.origin.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid("non-finite origin".into()));
        }
        Ok(())
    }

    /// Grid covering `[lo, hi]` with the given voxel size (dims rounded up).
    pub fn covering(lo: [f64; 3], hi: [f64; 3], voxel_size: [f64; 3]) -> Result<Self> {
        let dims = [0, 1, 2].map(|a| (((hi[a] - lo[a]) / voxel_size[a]).ceil() as usize).max(1));
        Self::new(lo, voxel_size, dims)
    }

    pub fn num_cells(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn upper(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.origin[a] + self.voxel_size[a] * self.dims[a] as f64)
    }

    pub fn extent(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.voxel_size[a] * self.dims[a] as f64)
    }

    /// Length of the grid diagonal.
    pub fn diagonal(&self) -> f64 {
        self.extent().iter().map(|e| e * e).sum::<f64>().sqrt()
    }

    /// Cell containing `p`. Cells are half-open except that the grid's upper
    /// faces are closed, so points exactly on them land in the last cell.
    pub fn cell_of(&self, p: &[f64; 3]) -> Option<[u32; 3]> {
        let up = self.upper();
        let mut c = [0u32; 3];
        for a in 0..3 {
            if !(p[a] >= self.origin[a] && p[a] <= up[a]) {
                return None;
            }
            let i = if p[a] == up[a] {
                self.dims[a] - 1
            } else {
                (((p[a] - self.origin[a]) / self.voxel_size[a]).floor() as usize).min(self.dims[a] - 1)
            };
            c[a] = i as u32;
        }
        Some(c)
    }

    pub fn center(&self, c: [u32; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| self.origin[a] + (c[a] as f64 + 0.5) * self.voxel_size[a])
    }

    /// Row-major linear index of a cell (x slowest).
    pub fn linear(&self, c: [u32; 3]) -> usize {
        (c[0] as usize * self.dims[1] + c[1] as usize) * self.dims[2] + c[2] as usize
    }

    /// Maps a metric point to `[0,1]³` relative to the grid bounds.
    pub fn normalize(&self, p: &[f64; 3]) -> [f64; 3] {
        let e = self.extent();
        [0, 1, 2].map(|a| (p[a] - self.origin[a]) / e[a])
    }

    pub fn denormalize(&self, u: &[f64; 3]) -> [f64; 3] {
        let e = self.extent();
        [0, 1, 2].map(|a| self.origin[a] + u[a] * e[a])
    }

    /// Grid after a stride-2 downsample: same origin, doubled voxels,
    /// `ceil(n / 2)` cells per axis.
    pub fn downsampled(&self) -> Self {
        VoxelGridSpec { origin: self.origin, voxel_size: self.voxel_size.map(|v| v * 2.0), dims: self.dims.map(|d| d.div_ceil(2)) }
    }

    pub fn contains(&self, p: &[f64; 3]) -> bool {
        self.cell_of(p).is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_specs() {
        assert!(VoxelGridSpec::new([0.0; 3], [0.0, 1.0, 1.0], [1, 1, 1]).is_err());
        assert!(VoxelGridSpec::new([0.0; 3], [1.0; 3], [1, 0, 1]).is_err());
    }

    #[test]
    fn upper_face_is_closed() {
        let s = VoxelGridSpec::new([0.0; 3], [1.0; 3], [2, 2, 2]).unwrap();
        assert_eq!(s.cell_of(&[2.0, 2.0, 2.0]), Some([1, 1, 1]));
        assert_eq!(s.cell_of(&[1.0, 0.0, 0.999]), Some([1, 0, 0]));
        assert_eq!(s.cell_of(&[2.0 + 1e-12, 0.0, 0.0]), None);
        assert_eq!(s.cell_of(&[-1e-12, 0.0, 0.0]), None);
    }

    #[test]
    fn normalize_round_trip() {
        let s = VoxelGridSpec::new([-1.0, 2.0, 0.5], [0.5, 0.25, 1.0], [4, 8, 3]).unwrap();
        let p = [0.3, 3.1, 1.7];
        let q = s.denormalize(&s.normalize(&p));
        for a in 0..3 {
            assert!((p[a] - q[a]).abs() < 1e-12);
        }
        assert_eq!(s.normalize(&s.center([0, 0, 0])), [0.125, 0.0625, 1.0 / 6.0]);
    }

    #[test]
    fn downsample_rounds_up() {
        let s = VoxelGridSpec::new([0.0; 3], [1.0; 3], [7, 8, 1]).unwrap().downsampled();
        assert_eq!(s.dims, [4, 4, 1]);
        assert_eq!(s.voxel_size, [2.0; 3]);
    }

    #[test]
    fn feature_shape_is_checked() {
        assert!(PointCloud::new(vec![[0.0; 3]; 2], 1, vec![1.0]).is_err());
        assert!(PointCloud::new(vec![[f64::NAN, 0.0, 0.0]], 0, vec![]).is_err());
        let c = PointCloud::new(vec![[0.0; 3], [2.0, 0.0, 0.0]], 1, vec![1.0, 3.0]).unwrap();
        assert_eq!(c.feature(1), &[3.0]);
        assert_eq!(c.centroid(), Some([1.0, 0.0, 0.0]));
    }
}
