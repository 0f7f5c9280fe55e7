use std::f64::consts::PI;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::box3d::Box3D;
use super::iou::{iou_axis_aligned_3d, iou_breakdown, overlap_area_xy};

fn inside_xy(b: &Box3D<f64>, x: f64, y: f64) -> bool {
    let (s, c) = b.yaw.sin_cos();
    let (dx, dy) = (x - b.cx, y - b.cy);
    (c * dx + s * dy).abs() <= b.w / 2.0 && (-s * dx + c * dy).abs() <= b.l / 2.0
}

fn aabb_xy(b: &Box3D<f64>) -> [f64; 4] {
    let (s, c) = b.yaw.sin_cos();
    let hx = (c * b.w).abs() / 2.0 + (s * b.l).abs() / 2.0;
    let hy = (s * b.w).abs() / 2.0 + (c * b.l).abs() / 2.0;
    [b.cx - hx, b.cx + hx, b.cy - hy, b.cy + hy]
}

/// Monte-Carlo footprint overlap with jittered stratification: one uniform
/// sample per cell of a `√samples × √samples` grid over the intersection of
/// the two footprints' bounding rectangles.
pub fn mc_overlap_area_xy(a: &Box3D<f64>, b: &Box3D<f64>, samples: usize, rng: &mut impl Rng) -> f64 {
    let (ra, rb) = (aabb_xy(a), aabb_xy(b));
    let (x0, x1) = (ra[0].max(rb[0]), ra[1].min(rb[1]));
    let (y0, y1) = (ra[2].max(rb[2]), ra[3].min(rb[3]));
    if x0 >= x1 || y0 >= y1 {
        return 0.0;
    }
    let side = (samples as f64).sqrt().ceil().max(1.0) as usize;
    let (dx, dy) = ((x1 - x0) / side as f64, (y1 - y0) / side as f64);
    let mut hits = 0usize;
    for i in 0..side {
        for j in 0..side {
            let x = x0 + (i as f64 + rng.gen::<f64>()) * dx;
            let y = y0 + (j as f64 + rng.gen::<f64>()) * dy;
            if inside_xy(a, x, y) && inside_xy(b, x, y) {
                hits += 1;
            }
        }
    }
    (x1 - x0) * (y1 - y0) * hits as f64 / (side * side) as f64
}

/// Random pair of boxes that overlap often: centers within 1 of the origin.
pub fn random_pair(rng: &mut impl Rng) -> (Box3D<f64>, Box3D<f64>) {
    let mut b = || {
        Box3D::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-0.5..0.5),
            rng.gen_range(0.3..2.5),
            rng.gen_range(0.3..2.5),
            rng.gen_range(0.3..2.0),
            rng.gen_range(-PI..PI),
        )
        .unwrap()
    };
    (b(), b())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IouBenchReport {
    pub pairs: usize,
    pub max_mc_abs_err: f64,
    pub max_axis_aligned_err: f64,
    pub max_identity_err: f64,
    /// Exact IoU evaluations per second.
    pub iou_per_sec: f64,
    pub seconds: f64,
}

/// Checks the exact overlap against Monte Carlo, axis-aligned pairs against
/// interval arithmetic and the decoupled-IoU identity; times the exact path.
pub fn iou_bench(pairs: usize, samples: usize, seed: u64) -> IouBenchReport {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep =
        IouBenchReport { pairs, max_mc_abs_err: 0.0, max_axis_aligned_err: 0.0, max_identity_err: 0.0, iou_per_sec: 0.0, seconds: 0.0 };
    let mut boxes = Vec::with_capacity(pairs);
    for _ in 0..pairs {
        let (a, b) = random_pair(&mut rng);
        let exact = overlap_area_xy(&a, &b);
        let mc = mc_overlap_area_xy(&a, &b, samples, &mut rng);
        rep.max_mc_abs_err = rep.max_mc_abs_err.max((exact - mc).abs());
        let r = iou_breakdown(&a, &b);
        rep.max_identity_err = rep.max_identity_err.max((r.iou_de - (r.iou_xy + r.iou_z) / 2.0).abs());
        let (mut aa, mut ab) = (a, b);
        aa.yaw = 0.0;
        ab.yaw = 0.0;
        rep.max_axis_aligned_err = rep.max_axis_aligned_err.max((iou_breakdown(&aa, &ab).iou_3d - iou_axis_aligned_3d(&aa, &ab)).abs());
        boxes.push((a, b));
    }
    let t = Instant::now();
    let mut acc = 0.0;
    for _ in 0..10 {
        for (a, b) in &boxes {
            acc += iou_breakdown(a, b).iou_3d;
        }
    }
    std::hint::black_box(acc);
    rep.iou_per_sec = (10 * pairs) as f64 / t.elapsed().as_secs_f64().max(1e-9);
    rep.seconds = start.elapsed().as_secs_f64();
    rep
}
