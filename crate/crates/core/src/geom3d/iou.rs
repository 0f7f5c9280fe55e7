use std::cmp::Ordering;

use crate::scalar::Real;

use super::box3d::Box3D;

/// Components of the oriented-box IoU family for one pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IoUBreakdown<T> {
    pub area_overlap: T,
    pub z_overlap: T,
    pub iou_xy: T,
    pub iou_z: T,
    pub iou_3d: T,
    pub iou_de: T,
}

/// Orders the pair so every pairwise quantity is bitwise symmetric.
fn canonical<'a, T: Real>(a: &'a Box3D<T>, b: &'a Box3D<T>) -> (&'a Box3D<T>, &'a Box3D<T>) {
    let pa = a.to_array();
    let pb = b.to_array();
    for (x, y) in pa.iter().zip(pb.iter()) {
        match x.value().total_cmp(&y.value()) {
            Ordering::Less => return (a, b),
            Ordering::Greater => return (b, a),
            Ordering::Equal => {}
        }
    }
    (a, b)
}

fn same_params<T: Real>(a: &Box3D<T>, b: &Box3D<T>) -> bool {
    a.to_array().iter().zip(b.to_array().iter()).all(|(x, y)| x.value() == y.value())
}

fn same_footprint<T: Real>(a: &Box3D<T>, b: &Box3D<T>) -> bool {
    [a.cx, a.cy, a.w, a.l, a.yaw].iter().zip([b.cx, b.cy, b.w, b.l, b.yaw].iter()).all(|(x, y)| x.value() == y.value())
}

/// Exact intersection area of the two rotated footprints.
pub fn overlap_area_xy<T: Real>(a: &Box3D<T>, b: &Box3D<T>) -> T {
    let (a, b) = canonical(a, b);
    if same_footprint(a, b) {
        return a.area_xy();
    }
    let raw = a.corners_xy().intersection_area(&b.corners_xy());
    let cap = a.area_xy().min(b.area_xy());
    if raw > cap {
        cap
    } else {
        raw
    }
}

/// Length of the shared vertical interval.
pub fn overlap_z<T: Real>(a: &Box3D<T>, b: &Box3D<T>) -> T {
    let (a, b) = canonical(a, b);
    let top = a.z_top().min(b.z_top());
    let bot = a.z_bottom().max(b.z_bottom());
    (top - bot).max(T::zero())
}

/// All IoU variants for a pair, computed from one clipping pass.
pub fn iou_breakdown<T: Real>(a: &Box3D<T>, b: &Box3D<T>) -> IoUBreakdown<T> {
    if same_params(a, b) {
        return IoUBreakdown {
            area_overlap: a.area_xy(),
            z_overlap: a.h,
            iou_xy: T::one(),
            iou_z: T::one(),
            iou_3d: T::one(),
            iou_de: T::one(),
        };
    }
    let (a, b) = canonical(a, b);
    let area_overlap = overlap_area_xy(a, b);
    let z_overlap = overlap_z(a, b);
    let ratio = |num: T, den: T| {
        if den > T::zero() {
            (num / den).min(T::one()).max(T::zero())
        } else {
            T::zero()
        }
    };
    let iou_xy = ratio(area_overlap, a.area_xy() + b.area_xy() - area_overlap);
    let iou_z = ratio(z_overlap, a.h + b.h - z_overlap);
    let inter = area_overlap * z_overlap;
    // never exceeds either planar factor, also under rounding
    let iou_3d = ratio(inter, a.volume() + b.volume() - inter).min(iou_xy).min(iou_z);
    IoUBreakdown { area_overlap, z_overlap, iou_xy, iou_z, iou_3d, iou_de: (iou_xy + iou_z) / T::lit(2.0) }
}

/// Volumetric IoU of two oriented boxes.
pub fn iou_3d<T: Real>(a: &Box3D<T>, b: &Box3D<T>) -> T {
    iou_breakdown(a, b).iou_3d
}

/// Decoupled IoU: mean of footprint IoU and vertical-interval IoU.
pub fn iou_de<T: Real>(a: &Box3D<T>, b: &Box3D<T>) -> T {
    iou_breakdown(a, b).iou_de
}

/// IoU of the axis-aligned boxes enclosing `a` and `b`.
pub fn iou_axis_aligned_3d<T: Real>(a: &Box3D<T>, b: &Box3D<T>) -> T {
    let (a, b) = canonical(a, b);
    let ea = a.aabb_half_extents();
    let eb = b.aabb_half_extents();
    let ca = [a.cx, a.cy, a.cz];
    let cb = [b.cx, b.cy, b.cz];
    let mut inter = T::one();
    let mut va = T::one();
    let mut vb = T::one();
    let two = T::lit(2.0);
    for k in 0..3 {
        let lo = (ca[k] - ea[k]).max(cb[k] - eb[k]);
        let hi = (ca[k] + ea[k]).min(cb[k] + eb[k]);
        inter *= (hi - lo).max(T::zero());
        va = va * ea[k] * two;
        vb = vb * eb[k] * two;
    }
    let den = va + vb - inter;
    if den > T::zero() {
        (inter / den).min(T::one())
    } else {
        T::zero()
    }
}
