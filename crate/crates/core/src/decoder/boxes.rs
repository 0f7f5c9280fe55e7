use crate::geom3d::Box3D;
use crate::Box3;

/// Width of a box regression row: `(δx, δy, δz, log w, log l, log h, sin θ, cos θ)`.
pub const REG_DIM: usize = 8;

/// Smallest decoded extent.
pub const MIN_EXTENT: f64 = 1e-3;

/// Decodes a regression row relative to its query point. Extents are
/// clamped to `[MIN_EXTENT, max_extent]`.
pub fn decode_box(position: &[f64; 3], reg: &[f64; REG_DIM], max_extent: f64) -> Box3 {
    let ext = |v: f64| v.exp().clamp(MIN_EXTENT, max_extent);
    Box3D::new_unchecked(
        position[0] + reg[0],
        position[1] + reg[1],
        position[2] + reg[2],
        ext(reg[3]),
        ext(reg[4]),
        ext(reg[5]),
        reg[6].atan2(reg[7]),
    )
}

/// Inverse of [`decode_box`] for in-range extents.
pub fn encode_box(position: &[f64; 3], b: &Box3) -> [f64; REG_DIM] {
    [b.cx - position[0], b.cy - position[1], b.cz - position[2], b.w.ln(), b.l.ln(), b.h.ln(), b.yaw.sin(), b.yaw.cos()]
}

/// The 8 grid-normalized box parameters used by the L1 loss:
/// center over grid extent, log extents, yaw sine and cosine.
pub fn normalized_params(b: &Box3, origin: &[f64; 3], extent: &[f64; 3]) -> [f64; 8] {
    [
        (b.cx - origin[0]) / extent[0],
        (b.cy - origin[1]) / extent[1],
        (b.cz - origin[2]) / extent[2],
        b.w.ln(),
        b.l.ln(),
        b.h.ln(),
        b.yaw.sin(),
        b.yaw.cos(),
    ]
}
