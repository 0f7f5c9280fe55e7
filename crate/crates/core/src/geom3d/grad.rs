//! Gradients of the decoupled IoU with respect to the first box.
//!
//! The clipped-polygon area is piecewise smooth in the box parameters. Running
//! the generic IoU code on [`Dual`] numbers differentiates whichever piece the
//! current configuration lies on.

use crate::error::{Error, Result};
use num_traits::Float;

use crate::scalar::Dual;

use super::box3d::Box3D;
use super::iou::{iou_breakdown, overlap_area_xy};

/// Raw parameters `(cx, cy, cz, w, l, h, yaw)` of a box being differentiated.
pub type DiffBoxParams = [f64; 7];

fn dual_box<const N: usize>(p: &[f64; 7]) -> Box3D<Dual<N>> {
    Box3D::new_unchecked(
        Dual::variable(p[0], 0),
        Dual::variable(p[1], 1),
        Dual::variable(p[2], 2),
        Dual::variable(p[3], 3),
        Dual::variable(p[4], 4),
        Dual::variable(p[5], 5),
        Dual::variable(p[6], 6),
    )
}

fn lift<const N: usize>(b: &Box3D<f64>) -> Box3D<Dual<N>> {
    Box3D {
        cx: Dual::constant(b.cx),
        cy: Dual::constant(b.cy),
        cz: Dual::constant(b.cz),
        w: Dual::constant(b.w),
        l: Dual::constant(b.l),
        h: Dual::constant(b.h),
        yaw: Dual::constant(b.yaw),
    }
}

/// Decoupled IoU and its gradient over the 7 parameters of `a`.
pub fn iou_de_with_grad(a: &DiffBoxParams, b: &Box3D<f64>) -> Result<(f64, [f64; 7])> {
    Box3D::from_array(*a)?;
    let da = dual_box::<7>(a);
    let r = iou_breakdown(&da, &lift(b)).iou_de;
    Ok((r.v, r.d))
}

/// Decoupled IoU for a box given as `(cx, cy, cz, w, l, h, sin, cos)`, with the
/// gradient over those 8 values. Yaw is `atan2(sin, cos)`.
///
/// This is the parameterization the regression head produces, so the training
/// loss differentiates through it directly.
pub fn iou_de_sincos_with_grad(p: &[f64; 8], b: &Box3D<f64>) -> (f64, [f64; 8]) {
    let v = |i: usize| Dual::<8>::variable(p[i], i);
    let yaw = v(6).atan2(v(7));
    let da = Box3D::new_unchecked(v(0), v(1), v(2), v(3), v(4), v(5), yaw);
    let r = iou_breakdown(&da, &lift(b)).iou_de;
    (r.v, r.d)
}

/// Discrete features of a configuration; a change between two nearby probes
/// means the IoU switched pieces in between.
fn topology(a: &Box3D<f64>, b: &Box3D<f64>) -> (usize, bool, bool, bool, bool) {
    let clipped = a.corners_xy().clip(&b.corners_xy());
    let n = if clipped.vertices.len() < 3 { 0 } else { clipped.vertices.len() };
    let contained = overlap_area_xy(a, b) >= a.area_xy().min(b.area_xy());
    (n, a.z_top() < b.z_top(), a.z_bottom() > b.z_bottom(), a.z_top().min(b.z_top()) > a.z_bottom().max(b.z_bottom()), contained)
}

/// Compares [`iou_de_with_grad`] against central differences with step `eps`.
///
/// Returns the largest relative error over the 7 components, or
/// [`Error::NonDifferentiable`] when a probe pair straddles a change of
/// clipping topology (vertex count, z ordering, containment).
pub fn fd_check_iou_de(a: &DiffBoxParams, b: &Box3D<f64>, eps: f64) -> Result<f64> {
    let (_, grad) = iou_de_with_grad(a, b)?;
    let base = Box3D::from_array(*a)?;
    let topo = topology(&base, b);
    let mut worst: f64 = 0.0;
    for k in 0..7 {
        let mut plus = *a;
        let mut minus = *a;
        plus[k] += eps;
        minus[k] -= eps;
        let bp = Box3D::from_array(plus)?;
        let bm = Box3D::from_array(minus)?;
        if topology(&bp, b) != topo || topology(&bm, b) != topo {
            return Err(Error::NonDifferentiable(format!("parameter {k} probes straddle a clipping topology change")));
        }
        let fd = (iou_breakdown(&bp, b).iou_de - iou_breakdown(&bm, b).iou_de) / (2.0 * eps);
        worst = worst.max(relative_error(grad[k], fd));
    }
    Ok(worst)
}

/// `|a - b| / max(|a|, |b|, 1e-4)`; the floor keeps near-zero components from
/// amplifying round-off.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}
