//! Scene augmentation: ground-truth pasting from an object bank, a mirror
//! across the grid's y midline, and global rotation and scaling about the
//! sensor origin.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom3d::{overlap_area_xy, Box3D};
use crate::pointops::{PointCloud, VoxelGridSpec};
use crate::Box3;

use super::GroundTruth;

pub const BANK_MAGIC: &[u8; 4] = b"UOB1";

/// Points within this distance outside a box still belong to its object.
pub const BANK_MARGIN: f64 = 0.1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(default)]
pub struct AugmentConfig {
    /// Objects pasted into each training scene per visit; 0 disables.
    pub paste: usize,
    /// Mirror half of the visits across the grid's y midline.
    pub flip_y: bool,
    /// Largest yaw of the global rotation about the z axis through the
    /// origin, in radians; 0 disables.
    pub rotate: f64,
    /// Global scale is drawn from `[1 - scale, 1 + scale]`; 0 disables.
    pub scale: f64,
}

impl AugmentConfig {
    pub fn is_active(&self) -> bool {
        self.paste > 0 || self.flip_y || self.rotate > 0.0 || self.scale > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rotate >= 0.0 && self.rotate.is_finite()) || !(0.0..1.0).contains(&self.scale) {
            return Err(Error::Config(format!(
                "augment: need rotate ≥ 0 and 0 ≤ scale < 1, got rotate={} scale={}",
                self.rotate, self.scale
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BankObject {
    pub class_id: usize,
    pub bx: Box3,
    pub points: Vec<[f64; 3]>,
    pub features: Vec<f64>,
}

/// Ground-truth objects with their points, at their recorded poses.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectBank {
    pub feat_dim: usize,
    pub objects: Vec<BankObject>,
}

fn grown(b: &Box3, m: f64) -> Box3 {
    Box3D { w: b.w + 2.0 * m, l: b.l + 2.0 * m, h: b.h + 2.0 * m, ..*b }
}

/// Whether `p` lies inside `b` (closed).
pub fn point_in_box(b: &Box3, p: &[f64; 3]) -> bool {
    let (s, c) = b.yaw.sin_cos();
    let (dx, dy) = (p[0] - b.cx, p[1] - b.cy);
    (c * dx + s * dy).abs() <= b.w / 2.0 && (-s * dx + c * dy).abs() <= b.l / 2.0 && (p[2] - b.cz).abs() <= b.h / 2.0
}

impl ObjectBank {
    /// Collects every ground truth with at least one point.
    pub fn from_scenes<'a>(scenes: impl IntoIterator<Item = (&'a PointCloud, &'a [GroundTruth])>) -> Self {
        let mut feat_dim = None;
        let mut objects = Vec::new();
        for (cloud, gts) in scenes {
            feat_dim.get_or_insert(cloud.feat_dim);
            for g in gts {
                let region = grown(&g.bx, BANK_MARGIN);
                let mut o = BankObject { class_id: g.class_id, bx: g.bx, points: Vec::new(), features: Vec::new() };
                for (i, p) in cloud.points.iter().enumerate() {
                    if point_in_box(&region, p) {
                        o.points.push(*p);
                        o.features.extend_from_slice(cloud.feature(i));
                    }
                }
                if !o.points.is_empty() {
                    objects.push(o);
                }
            }
        }
        ObjectBank { feat_dim: feat_dim.unwrap_or(0), objects }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(BANK_MAGIC);
        out.extend_from_slice(&(self.feat_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.objects.len() as u32).to_le_bytes());
        for o in &self.objects {
            out.extend_from_slice(&(o.class_id as u32).to_le_bytes());
            for v in o.bx.to_array() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&(o.points.len() as u32).to_le_bytes());
            for v in o.points.iter().flatten().chain(&o.features) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0, path };
        if c.take(4)? != BANK_MAGIC {
            return Err(c.err(0, "bad magic, expected UOB1"));
        }
        let feat_dim = c.u32()?;
        let count = c.u32()?;
        let mut objects = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let class_id = c.u32()?;
            let at = c.pos;
            let b = c.f64s(7)?;
            let bx = Box3D::from_array([b[0], b[1], b[2], b[3], b[4], b[5], b[6]]).map_err(|e| c.err(at, &e.to_string()))?;
            let n = c.u32()?;
            let points = c.f64s(3 * n)?.chunks_exact(3).map(|v| [v[0], v[1], v[2]]).collect();
            let features = c.f64s(feat_dim * n)?;
            objects.push(BankObject { class_id, bx, points, features });
        }
        if c.pos != bytes.len() {
            return Err(c.err(c.pos, "trailing bytes after object bank"));
        }
        Ok(ObjectBank { feat_dim, objects })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.encode())?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?, path)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn err(&self, at: usize, msg: &str) -> Error {
        Error::Parse { path: self.path.display().to_string(), position: format!("byte {at}"), msg: msg.into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(self.bytes.len(), "truncated object bank"));
        }
        self.pos += n;
        Ok(&self.bytes[self.pos - n..self.pos])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n.checked_mul(8).ok_or_else(|| self.err(self.pos, "length overflow"))?;
        Ok(self.take(len)?.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect())
    }
}

fn in_grid(grid: &VoxelGridSpec, p: &[f64; 3]) -> bool {
    (0..3).all(|a| p[a] >= grid.origin[a] && p[a] < grid.origin[a] + grid.dims[a] as f64 * grid.voxel_size[a])
}

/// Pastes up to `cfg.paste` bank objects whose footprints clear every
/// existing box, mirrors across the grid's y midline with probability ½,
/// then rotates and scales about the origin. After a rotation or scale,
/// points outside `grid` are cropped and boxes whose centers left it are
/// dropped.
pub fn augment_scene(
    cloud: &PointCloud,
    gts: &[GroundTruth],
    bank: Option<&ObjectBank>,
    cfg: &AugmentConfig,
    grid: &VoxelGridSpec,
    rng: &mut impl Rng,
) -> (PointCloud, Vec<GroundTruth>) {
    let mirror_y = grid.origin[1] + grid.dims[1] as f64 * grid.voxel_size[1] / 2.0;
    let mut cloud = cloud.clone();
    let mut gts = gts.to_vec();
    if let Some(bank) = bank.filter(|b| cfg.paste > 0 && !b.objects.is_empty() && b.feat_dim == cloud.feat_dim) {
        let picks: Vec<&BankObject> = bank.objects.choose_multiple(rng, cfg.paste).collect();
        for o in picks {
            let region = grown(&o.bx, BANK_MARGIN);
            if gts.iter().any(|g| overlap_area_xy(&grown(&g.bx, BANK_MARGIN), &region) > 0.0) {
                continue;
            }
            let f = cloud.feat_dim;
            let keep: Vec<usize> = (0..cloud.points.len()).filter(|&i| !point_in_box(&region, &cloud.points[i])).collect();
            let mut points: Vec<[f64; 3]> = keep.iter().map(|&i| cloud.points[i]).collect();
            let mut features: Vec<f64> = keep.iter().flat_map(|&i| cloud.feature(i).to_vec()).collect();
            points.extend_from_slice(&o.points);
            features.extend_from_slice(&o.features);
            cloud = PointCloud { points, feat_dim: f, features };
            gts.push(GroundTruth { bx: o.bx, class_id: o.class_id });
        }
    }
    if cfg.flip_y && rng.gen_bool(0.5) {
        for p in &mut cloud.points {
            p[1] = 2.0 * mirror_y - p[1];
        }
        for g in &mut gts {
            g.bx = Box3D::new_unchecked(g.bx.cx, 2.0 * mirror_y - g.bx.cy, g.bx.cz, g.bx.w, g.bx.l, g.bx.h, -g.bx.yaw);
        }
    }
    if cfg.rotate > 0.0 || cfg.scale > 0.0 {
        let theta = if cfg.rotate > 0.0 { rng.gen_range(-cfg.rotate..=cfg.rotate) } else { 0.0 };
        let k = if cfg.scale > 0.0 { rng.gen_range(1.0 - cfg.scale..=1.0 + cfg.scale) } else { 1.0 };
        let (s, c) = theta.sin_cos();
        let tf = |p: [f64; 3]| [k * (c * p[0] - s * p[1]), k * (s * p[0] + c * p[1]), k * p[2]];
        let keep: Vec<usize> = (0..cloud.points.len()).filter(|&i| in_grid(grid, &tf(cloud.points[i]))).collect();
        let f = cloud.feat_dim;
        cloud = PointCloud {
            points: keep.iter().map(|&i| tf(cloud.points[i])).collect(),
            feat_dim: f,
            features: keep.iter().flat_map(|&i| cloud.feature(i).to_vec()).collect(),
        };
        gts = gts
            .into_iter()
            .map(|g| {
                let b = g.bx;
                let [cx, cy, cz] = tf([b.cx, b.cy, b.cz]);
                GroundTruth { bx: Box3D::new_unchecked(cx, cy, cz, k * b.w, k * b.l, k * b.h, b.yaw + theta), class_id: g.class_id }
            })
            .filter(|g| in_grid(grid, &[g.bx.cx, g.bx.cy, g.bx.cz]))
            .collect();
    }
    (cloud, gts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cube(cx: f64, cy: f64) -> Box3 {
        Box3D::new(cx, cy, 0.5, 1.0, 1.0, 1.0, 0.3).unwrap()
    }

    /// 10 × 10 × 2 m starting at the origin, so the mirror line is y = 5.
    fn grid() -> VoxelGridSpec {
        VoxelGridSpec::new([0.0, 0.0, -1.0], [0.5; 3], [20, 20, 4]).unwrap()
    }

    fn scene() -> (PointCloud, Vec<GroundTruth>) {
        let mut pts = Vec::new();
        for i in 0..20 {
            for j in 0..20 {
                pts.push([i as f64 * 0.5, j as f64 * 0.5, 0.0]);
            }
        }
        pts.push([2.0, 2.0, 0.5]);
        let n = pts.len();
        (
            PointCloud { points: pts, feat_dim: 1, features: (0..n).map(|i| i as f64).collect() },
            vec![GroundTruth { bx: cube(2.0, 2.0), class_id: 1 }],
        )
    }

    #[test]
    fn bank_collects_points_inside_boxes() {
        let (c, g) = scene();
        let bank = ObjectBank::from_scenes([(&c, g.as_slice())]);
        assert_eq!(bank.objects.len(), 1);
        let o = &bank.objects[0];
        assert!(o.points.contains(&[2.0, 2.0, 0.5]));
        assert!(o.points.iter().all(|p| point_in_box(&grown(&o.bx, BANK_MARGIN), p)));
        assert_eq!(o.features.len(), o.points.len());
    }

    #[test]
    fn bank_round_trips_and_rejects_damage() {
        let (c, g) = scene();
        let bank = ObjectBank::from_scenes([(&c, g.as_slice())]);
        let bytes = bank.encode();
        let p = Path::new("bank.bin");
        assert_eq!(ObjectBank::decode(&bytes, p).unwrap(), bank);
        let e = ObjectBank::decode(&bytes[..bytes.len() - 3], p).unwrap_err().to_string();
        assert!(e.contains("truncated"), "{e}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ObjectBank::decode(&bad, p).unwrap_err().to_string().contains("magic"));
        let mut long = bytes;
        long.push(0);
        assert!(ObjectBank::decode(&long, p).unwrap_err().to_string().contains("trailing"));
    }

    #[test]
    fn pasting_clears_footprints_and_adds_boxes() {
        let (c, g) = scene();
        let other = vec![GroundTruth { bx: cube(7.0, 7.0), class_id: 0 }];
        let mut oc = c.clone();
        oc.points.push([7.0, 7.0, 0.4]);
        oc.features.push(-1.0);
        let bank = ObjectBank::from_scenes([(&oc, other.as_slice())]);
        let cfg = AugmentConfig { paste: 1, ..Default::default() };
        let (out, gts) = augment_scene(&c, &g, Some(&bank), &cfg, &grid(), &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(gts.len(), 2);
        assert!(out.points.contains(&[7.0, 7.0, 0.4]));
        // scene points under the pasted box were replaced by the bank's
        let region = grown(&gts[1].bx, BANK_MARGIN);
        let inside: Vec<_> = out.points.iter().filter(|p| point_in_box(&region, p)).collect();
        assert_eq!(inside.len(), bank.objects[0].points.len());
        assert_eq!(out.features.len(), out.points.len());

        // a colliding object is skipped
        let (_, gts) =
            augment_scene(&c, &g, Some(&ObjectBank::from_scenes([(&c, g.as_slice())])), &cfg, &grid(), &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(gts.len(), 1);
    }

    #[test]
    fn flip_keeps_points_inside_their_boxes() {
        let (c, g) = scene();
        let cfg = AugmentConfig { flip_y: true, ..Default::default() };
        let mut flipped = 0;
        for s in 0..8 {
            let (out, gts) = augment_scene(&c, &g, None, &cfg, &grid(), &mut ChaCha8Rng::seed_from_u64(s));
            let before = c.points.iter().filter(|p| point_in_box(&g[0].bx, p)).count();
            let after = out.points.iter().filter(|p| point_in_box(&gts[0].bx, p)).count();
            assert_eq!(before, after);
            flipped += (gts[0].bx.cy != g[0].bx.cy) as usize;
        }
        assert!(flipped > 0 && flipped < 8);
    }

    #[test]
    fn rotation_and_scale_carry_points_with_their_boxes() {
        let (c, g) = scene();
        let cfg = AugmentConfig { rotate: 0.4, scale: 0.1, ..Default::default() };
        let before = c.points.iter().filter(|p| point_in_box(&g[0].bx, p)).count();
        for s in 0..8 {
            let (out, gts) = augment_scene(&c, &g, None, &cfg, &grid(), &mut ChaCha8Rng::seed_from_u64(s));
            assert!(out.points.iter().all(|p| in_grid(&grid(), p)));
            assert_eq!(out.features.len(), out.points.len());
            if let Some(b) = gts.first() {
                // shrink a hair so rounding at the faces cannot flip membership
                let inner = grown(&b.bx, -1e-9);
                let outer = grown(&b.bx, 1e-9);
                let n_in = out.points.iter().filter(|p| point_in_box(&inner, p)).count();
                let n_out = out.points.iter().filter(|p| point_in_box(&outer, p)).count();
                assert!(n_in <= before && before <= n_out, "{n_in} {before} {n_out}");
            }
        }
    }

    #[test]
    fn bad_ranges_are_rejected() {
        assert!(AugmentConfig { scale: 1.0, ..Default::default() }.validate().is_err());
        assert!(AugmentConfig { rotate: -0.1, ..Default::default() }.validate().is_err());
        assert!(AugmentConfig { rotate: 0.3, scale: 0.05, ..Default::default() }.validate().is_ok());
    }
}
