use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom3d::{overlap_area_xy, Box3D};
use crate::pointops::PointCloud;
use crate::train::GroundTruth;
use crate::Box3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneKind {
    Indoor,
    Outdoor,
}

/// Nominal size of one object class; each instance is scaled per axis by a
/// factor in `1 ± jitter`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    pub size: [f64; 3],
    pub jitter: f64,
}

impl ClassSpec {
    fn new(name: &str, size: [f64; 3], jitter: f64) -> Self {
        ClassSpec { name: name.to_string(), size, jitter }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(default)]
pub struct SynthConfig {
    pub kind: SceneKind,
    pub num_scenes: usize,
    pub objects: [usize; 2],
    pub classes: Vec<ClassSpec>,
    pub points: usize,
    /// Side extent of the square floor plan, meters.
    pub extent: f64,
    /// Fraction of points spent on background (floor, walls, ground, clutter).
    pub background: f64,
    /// Probability that a side face of an object is occluded.
    pub occlusion: f64,
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig::indoor()
    }
}

impl SynthConfig {
    pub fn indoor() -> Self {
        SynthConfig {
            kind: SceneKind::Indoor,
            num_scenes: 200,
            objects: [4, 10],
            classes: vec![
                ClassSpec::new("bed", [2.0, 1.6, 0.6], 0.15),
                ClassSpec::new("table", [1.4, 0.9, 0.75], 0.15),
                ClassSpec::new("chair", [0.55, 0.55, 0.9], 0.15),
                ClassSpec::new("cabinet", [1.0, 0.5, 1.8], 0.15),
            ],
            points: 3000,
            extent: 6.0,
            background: 0.3,
            occlusion: 0.25,
            noise: 0.01,
        }
    }

    pub fn outdoor() -> Self {
        SynthConfig {
            kind: SceneKind::Outdoor,
            num_scenes: 200,
            objects: [2, 8],
            classes: vec![ClassSpec::new("car", [1.6, 3.9, 1.5], 0.1)],
            points: 4000,
            extent: 70.0,
            background: 0.85,
            occlusion: 0.0,
            noise: 0.02,
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic scenes: {m}")));
        if self.objects[0] > self.objects[1] {
            return bad("object range min exceeds max");
        }
        if self.classes.is_empty() {
            return bad("no classes");
        }
        if self.classes.iter().any(|c| c.size.iter().any(|&s| !(s.is_finite() && s > 0.0)) || !(0.0..1.0).contains(&c.jitter)) {
            return bad("class sizes must be positive and jitter in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.background) || !(0.0..=1.0).contains(&self.occlusion) {
            return bad("background must lie in [0, 1) and occlusion in [0, 1]");
        }
        if self.points == 0 || !(self.extent.is_finite() && self.extent > 0.0) || !(self.noise.is_finite() && self.noise >= 0.0) {
            return bad("points, extent and noise must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub cloud: PointCloud,
    pub gts: Vec<GroundTruth>,
    pub kind: SceneKind,
    pub seed: u64,
    pub index: usize,
}

/// Whether `p` lies inside `b` (closed).
pub fn box_contains(b: &Box3, p: &[f64; 3]) -> bool {
    let (s, c) = b.yaw.sin_cos();
    let (dx, dy) = (p[0] - b.cx, p[1] - b.cy);
    let u = c * dx + s * dy;
    let v = -s * dx + c * dy;
    u.abs() <= b.w / 2.0 + 1e-9 && v.abs() <= b.l / 2.0 + 1e-9 && (p[2] - b.cz).abs() <= b.h / 2.0 + 1e-9
}

/// Grid covering the scene volume of `cfg` with the given voxel size.
pub fn scene_bounds(cfg: &SynthConfig) -> ([f64; 3], [f64; 3]) {
    match cfg.kind {
        SceneKind::Indoor => ([0.0, 0.0, 0.0], [cfg.extent, cfg.extent, 3.0]),
        SceneKind::Outdoor => ([0.0, -cfg.extent / 2.0, -3.0], [cfg.extent, cfg.extent / 2.0, 1.0]),
    }
}

const GROUND_Z: f64 = -1.7;

/// A face of a box: a point and two edge vectors spanning it, plus its
/// outward normal.
struct Face {
    o: [f64; 3],
    a: [f64; 3],
    b: [f64; 3],
    n: [f64; 3],
}

impl Face {
    fn area(&self) -> f64 {
        let cr = [
            self.a[1] * self.b[2] - self.a[2] * self.b[1],
            self.a[2] * self.b[0] - self.a[0] * self.b[2],
            self.a[0] * self.b[1] - self.a[1] * self.b[0],
        ];
        (cr[0] * cr[0] + cr[1] * cr[1] + cr[2] * cr[2]).sqrt()
    }

    fn sample(&self, rng: &mut impl Rng) -> [f64; 3] {
        let (s, t): (f64, f64) = (rng.gen(), rng.gen());
        [0, 1, 2].map(|k| self.o[k] + s * self.a[k] + t * self.b[k])
    }
}

/// Top face and the four side faces (the bottom rests on the floor).
fn faces(b: &Box3) -> Vec<Face> {
    let (s, c) = b.yaw.sin_cos();
    let ex = [c * b.w, s * b.w, 0.0];
    let ey = [-s * b.l, c * b.l, 0.0];
    let ez = [0.0, 0.0, b.h];
    let lo = [b.cx - (ex[0] + ey[0]) / 2.0, b.cy - (ex[1] + ey[1]) / 2.0, b.cz - b.h / 2.0];
    let add = |p: [f64; 3], v: [f64; 3]| [p[0] + v[0], p[1] + v[1], p[2] + v[2]];
    let unit = |v: [f64; 3], k: f64| [v[0] * k, v[1] * k, v[2] * k];
    vec![
        Face { o: add(lo, ez), a: ex, b: ey, n: [0.0, 0.0, 1.0] },
        Face { o: lo, a: ex, b: ez, n: unit(ey, -1.0 / b.l) },
        Face { o: add(lo, ey), a: ex, b: ez, n: unit(ey, 1.0 / b.l) },
        Face { o: lo, a: ey, b: ez, n: unit(ex, -1.0 / b.w) },
        Face { o: add(lo, ex), a: ey, b: ez, n: unit(ex, 1.0 / b.w) },
    ]
}

fn place_objects(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<GroundTruth> {
    let n = rng.gen_range(cfg.objects[0]..=cfg.objects[1]);
    let (lo, hi) = scene_bounds(cfg);
    let margin = 0.3;
    let mut out: Vec<GroundTruth> = Vec::new();
    let mut tries = 0;
    while out.len() < n && tries < 200 * n.max(1) {
        tries += 1;
        let class_id = rng.gen_range(0..cfg.classes.len());
        let spec = &cfg.classes[class_id];
        let j = spec.jitter;
        let size = spec.size.map(|s| s * rng.gen_range(1.0 - j..=1.0 + j));
        let yaw = rng.gen_range(-PI..PI);
        let r = 0.5 * (size[0] * size[0] + size[1] * size[1]).sqrt() + margin;
        let (x0, x1, y0, y1) = match cfg.kind {
            SceneKind::Indoor => (lo[0] + r, hi[0] - r, lo[1] + r, hi[1] - r),
            SceneKind::Outdoor => (5.0, hi[0] - r, lo[1] + r, hi[1] - r),
        };
        if x0 >= x1 || y0 >= y1 {
            continue;
        }
        let cx = rng.gen_range(x0..x1);
        let cy = rng.gen_range(y0..y1);
        let base = match cfg.kind {
            SceneKind::Indoor => 0.0,
            SceneKind::Outdoor => GROUND_Z,
        };
        let bx = Box3D::new(cx, cy, base + size[2] / 2.0, size[0], size[1], size[2], yaw).unwrap();
        let grown = Box3D::new_unchecked(cx, cy, bx.cz, size[0] + margin, size[1] + margin, size[2], yaw);
        if out.iter().any(|g| overlap_area_xy(&g.bx, &grown) > 0.0) {
            continue;
        }
        out.push(GroundTruth { bx, class_id });
    }
    out
}

/// Splits `total` into integer shares proportional to `weights` (largest
/// remainders last, deterministic).
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || !(sum.is_finite() && sum > 0.0) {
        return vec![0; weights.len()];
    }
    let raw: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut out: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut rest: Vec<usize> = (0..weights.len()).collect();
    rest.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    let short = total - out.iter().sum::<usize>();
    for &i in rest.iter().take(short) {
        out[i] += 1;
    }
    out
}

fn object_points(cfg: &SynthConfig, gts: &[GroundTruth], budget: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let mut per_obj: Vec<Vec<Face>> = Vec::new();
    let mut weights = Vec::new();
    for g in gts {
        let mut fs = faces(&g.bx);
        match cfg.kind {
            SceneKind::Indoor => {
                let keep: Vec<bool> = (0..fs.len()).map(|i| i == 0 || !rng.gen_bool(cfg.occlusion)).collect();
                let mut k = keep.iter();
                fs.retain(|_| *k.next().unwrap());
                weights.push(fs.iter().map(Face::area).sum::<f64>());
            }
            SceneKind::Outdoor => {
                // faces seen from a sensor at the origin
                let d = [g.bx.cx, g.bx.cy, g.bx.cz];
                fs.retain(|f| f.n[0] * d[0] + f.n[1] * d[1] + f.n[2] * (d[2] - 0.0) < 0.0 || f.n[2] > 0.5);
                let dist = (d[0] * d[0] + d[1] * d[1]).sqrt().max(5.0);
                weights.push(fs.iter().map(Face::area).sum::<f64>() / dist);
            }
        }
        per_obj.push(fs);
    }
    let counts = apportion(budget, &weights);
    let mut pts = Vec::with_capacity(budget);
    for (fs, n) in per_obj.iter().zip(counts) {
        let areas: Vec<f64> = fs.iter().map(Face::area).collect();
        for (f, m) in fs.iter().zip(apportion(n, &areas)) {
            for _ in 0..m {
                pts.push(f.sample(rng));
            }
        }
    }
    pts
}

fn background_points(cfg: &SynthConfig, gts: &[GroundTruth], n: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let (lo, hi) = scene_bounds(cfg);
    let mut pts = Vec::with_capacity(n);
    let inside = |p: &[f64; 3]| gts.iter().any(|g| box_contains(&g.bx, p));
    while pts.len() < n {
        let p = match cfg.kind {
            SceneKind::Indoor => {
                let u: f64 = rng.gen();
                if u < 0.5 {
                    [rng.gen_range(lo[0]..hi[0]), rng.gen_range(lo[1]..hi[1]), 0.0]
                } else if u < 0.9 {
                    // one of the two far walls
                    let t = rng.gen_range(0.0..cfg.extent);
                    let z = rng.gen_range(0.0..2.8);
                    if rng.gen_bool(0.5) {
                        [t, hi[1] - 0.05, z]
                    } else {
                        [hi[0] - 0.05, t, z]
                    }
                } else {
                    // small clutter items
                    [rng.gen_range(lo[0]..hi[0]), rng.gen_range(lo[1]..hi[1]), rng.gen_range(0.0..0.3)]
                }
            }
            SceneKind::Outdoor => {
                // ground density falls off with range
                let r = 3.0 + (cfg.extent - 3.0) * rng.gen::<f64>().powi(2);
                let a = rng.gen_range(-PI / 2.0..PI / 2.0);
                let (x, y) = (r * a.cos(), r * a.sin());
                if rng.gen_bool(0.1) {
                    [x, y, GROUND_Z + rng.gen_range(0.0..2.5)]
                } else {
                    [x, y, GROUND_Z]
                }
            }
        };
        let in_range = (0..3).all(|k| p[k] >= lo[k] && p[k] <= hi[k]);
        if in_range && !inside(&p) {
            pts.push(p);
        }
    }
    pts
}

/// One scene from a seeded generator.
pub fn gen_scene(cfg: &SynthConfig, seed: u64, index: usize) -> Result<SceneSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let gts = place_objects(cfg, &mut rng);
    let n_bg = ((cfg.points as f64) * cfg.background).round() as usize;
    let n_obj = if gts.is_empty() { 0 } else { cfg.points - n_bg };
    let mut pts = object_points(cfg, &gts, n_obj, &mut rng);
    pts.extend(background_points(cfg, &gts, cfg.points - pts.len(), &mut rng));
    let noise = Normal::new(0.0, cfg.noise.max(1e-12)).unwrap();
    let (lo, hi) = scene_bounds(cfg);
    for p in &mut pts {
        for k in 0..3 {
            p[k] = (p[k] + noise.sample(&mut rng)).clamp(lo[k], hi[k]);
        }
    }
    let features: Vec<f64> = pts.iter().map(|_| rng.gen::<f64>()).collect();
    let cloud = PointCloud::new(pts, 1, features)?;
    Ok(SceneSample { cloud, gts, kind: cfg.kind, seed, index })
}

/// `cfg.num_scenes` scenes; scene `i` depends only on `(seed, i)`.
pub fn gen_synthetic(cfg: &SynthConfig, seed: u64) -> Result<Vec<SceneSample>> {
    (0..cfg.num_scenes).map(|i| gen_scene(cfg, seed, i)).collect()
}
