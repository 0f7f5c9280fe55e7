use crate::error::{Error, Result};
use crate::scalar::Real;

use super::polygon::ConvexPolygon2D;

/// Oriented box: center, extents and yaw about +z.
///
/// `w` runs along the box's local x axis, `l` along local y, `h` along global
/// z. Yaw is measured counter-clockwise from +x.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Box3D<T> {
    pub cx: T,
    pub cy: T,
    pub cz: T,
    pub w: T,
    pub l: T,
    pub h: T,
    pub yaw: T,
}

/// Wraps an angle into (-π, π].
pub fn normalize_yaw<T: Real>(yaw: T) -> T {
    let pi = T::pi();
    let two_pi = pi + pi;
    let mut a = yaw;
    if a > pi || a <= -pi {
        a = a - two_pi * ((a + pi) / two_pi).floor();
        // floor puts us in [-π, π); map -π to π
        if a <= -pi {
            a += two_pi;
        }
    }
    a
}

impl<T: Real> Box3D<T> {
    /// Builds a box after checking extents; yaw is normalized.
    pub fn new(cx: T, cy: T, cz: T, w: T, l: T, h: T, yaw: T) -> Result<Self> {
        let b = Self::new_unchecked(cx, cy, cz, w, l, h, yaw);
        b.validate()?;
        Ok(b)
    }

    /// Builds a box without validation; yaw is still normalized.
    #[allow(clippy::too_many_arguments)]
    pub fn new_unchecked(cx: T, cy: T, cz: T, w: T, l: T, h: T, yaw: T) -> Self {
        Self { cx, cy, cz, w, l, h, yaw: normalize_yaw(yaw) }
    }

    pub fn from_array(p: [T; 7]) -> Result<Self> {
        Self::new(p[0], p[1], p[2], p[3], p[4], p[5], p[6])
    }

    pub fn to_array(&self) -> [T; 7] {
        [self.cx, self.cy, self.cz, self.w, self.l, self.h, self.yaw]
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.to_array();
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidBox(format!("non-finite parameter in {:?}", self.as_f64())));
        }
        if !(self.w > T::zero() && self.l > T::zero() && self.h > T::zero()) {
            return Err(Error::InvalidBox(format!(
                "extents must be positive, got w={} l={} h={}",
                self.w.value(),
                self.l.value(),
                self.h.value()
            )));
        }
        Ok(())
    }

    pub fn volume(&self) -> T {
        self.w * self.l * self.h
    }

    pub fn area_xy(&self) -> T {
        self.w * self.l
    }

    pub fn z_bottom(&self) -> T {
        self.cz - self.h / T::lit(2.0)
    }

    pub fn z_top(&self) -> T {
        self.cz + self.h / T::lit(2.0)
    }

    /// Uniformly scales all lengths and the center.
    pub fn scaled(&self, s: T) -> Self {
        Self { cx: self.cx * s, cy: self.cy * s, cz: self.cz * s, w: self.w * s, l: self.l * s, h: self.h * s, yaw: self.yaw }
    }

    pub fn as_f64(&self) -> Box3D<f64> {
        Box3D {
            cx: self.cx.value(),
            cy: self.cy.value(),
            cz: self.cz.value(),
            w: self.w.value(),
            l: self.l.value(),
            h: self.h.value(),
            yaw: self.yaw.value(),
        }
    }

    /// Footprint corners, counter-clockwise.
    pub fn corners_xy(&self) -> ConvexPolygon2D<T> {
        let (s, c) = self.yaw.sin_cos();
        let hw = self.w / T::lit(2.0);
        let hl = self.l / T::lit(2.0);
        let local = [(-hw, -hl), (hw, -hl), (hw, hl), (-hw, hl)];
        let vertices = local.iter().map(|&(dx, dy)| [self.cx + c * dx - s * dy, self.cy + s * dx + c * dy]).collect();
        ConvexPolygon2D { vertices }
    }

    /// Half extents of the axis-aligned box enclosing the rotated footprint.
    pub fn aabb_half_extents(&self) -> [T; 3] {
        let (s, c) = self.yaw.sin_cos();
        let (s, c) = (s.abs(), c.abs());
        let two = T::lit(2.0);
        [(c * self.w + s * self.l) / two, (s * self.w + c * self.l) / two, self.h / two]
    }
}

/// Corners of the box footprint; free-function form of [`Box3D::corners_xy`].
pub fn corners_xy<T: Real>(b: &Box3D<T>) -> ConvexPolygon2D<T> {
    b.corners_xy()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn unit(yaw: f64) -> Box3D<f64> {
        Box3D::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, yaw).unwrap()
    }

    fn sorted(mut v: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
        for p in &mut v {
            p[0] = (p[0] * 1e9).round() / 1e9 + 0.0;
            p[1] = (p[1] * 1e9).round() / 1e9 + 0.0;
        }
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v
    }

    #[test]
    fn unit_corners() {
        let got = sorted(unit(0.0).corners_xy().vertices);
        assert_eq!(got, vec![[-0.5, -0.5], [-0.5, 0.5], [0.5, -0.5], [0.5, 0.5]]);
    }

    #[test]
    fn square_symmetry_under_quarter_turn() {
        let a = sorted(unit(0.0).corners_xy().vertices);
        let b = sorted(unit(FRAC_PI_2).corners_xy().vertices);
        assert_eq!(a, b);
    }

    #[test]
    fn rotated_rectangle_area_by_shoelace() {
        let b = Box3D::new(0.3, -1.0, 0.0, 2.0, 1.0, 1.0, FRAC_PI_4).unwrap();
        let poly = b.corners_xy();
        assert!(poly.is_ccw());
        // independent shoelace
        let v = &poly.vertices;
        let mut s = 0.0;
        for i in 0..4 {
            let j = (i + 1) % 4;
            s += v[i][0] * v[j][1] - v[j][0] * v[i][1];
        }
        assert!((s / 2.0 - 2.0).abs() < 2.0 * 1e-12);
        assert!((poly.area() - 2.0).abs() < 2.0 * 1e-12);
    }

    #[test]
    fn yaw_wraps_into_half_open_range() {
        assert!((normalize_yaw(3.0 * PI) - PI).abs() < 1e-12);
        assert_eq!(normalize_yaw(-PI), PI);
        assert!((normalize_yaw(-3.0 * PI / 2.0) - FRAC_PI_2).abs() < 1e-12);
        assert_eq!(normalize_yaw(0.25), 0.25);
    }

    #[test]
    fn rejects_bad_extents() {
        assert!(Box3D::new(0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0).is_err());
        assert!(Box3D::new(0.0, 0.0, 0.0, 1.0, -1.0, 1.0, 0.0).is_err());
        assert!(Box3D::new(f64::NAN, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0).is_err());
    }
}
