//! Oriented 3D box geometry and the IoU family used for losses, matching,
//! merging and evaluation.
//!
//! Conventions: yaw rotates about +z counter-clockwise from +x, `w` lies along
//! the box's local x axis and `l` along local y. All functions are pure and
//! generic over [`Real`](crate::scalar::Real).

mod box3d;
mod grad;
mod iou;
mod oracle;
mod polygon;

pub use box3d::{corners_xy, normalize_yaw, Box3D};
pub use grad::{fd_check_iou_de, iou_de_sincos_with_grad, iou_de_with_grad, relative_error, DiffBoxParams};
pub use iou::{iou_3d, iou_axis_aligned_3d, iou_breakdown, iou_de, overlap_area_xy, overlap_z, IoUBreakdown};
pub use oracle::{iou_bench, mc_overlap_area_xy, random_pair, IouBenchReport};
pub use polygon::{ConvexPolygon2D, GEOM_EPS};
