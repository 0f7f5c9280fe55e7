use crate::scalar::Real;

/// Tolerance used by the clipping side-of-line predicate.
pub const GEOM_EPS: f64 = 1e-12;

/// Convex polygon with counter-clockwise vertices.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvexPolygon2D<T> {
    pub vertices: Vec<[T; 2]>,
}

#[inline]
fn cross<T: Real>(o: [T; 2], a: [T; 2], b: [T; 2]) -> T {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

impl<T: Real> ConvexPolygon2D<T> {
    /// Shoelace area; zero for fewer than three vertices.
    pub fn area(&self) -> T {
        let v = &self.vertices;
        if v.len() < 3 {
            return T::zero();
        }
        let mut s = T::zero();
        for i in 0..v.len() {
            let j = (i + 1) % v.len();
            s += v[i][0] * v[j][1] - v[j][0] * v[i][1];
        }
        s / T::lit(2.0)
    }

    pub fn is_ccw(&self) -> bool {
        self.area() >= T::zero()
    }

    /// Sutherland–Hodgman clip of `self` against the convex CCW `clip`.
    pub fn clip(&self, clip: &ConvexPolygon2D<T>) -> ConvexPolygon2D<T> {
        let eps = T::lit(GEOM_EPS);
        let mut out = self.vertices.clone();
        let n = clip.vertices.len();
        for e in 0..n {
            if out.is_empty() {
                break;
            }
            let a = clip.vertices[e];
            let b = clip.vertices[(e + 1) % n];
            let input = std::mem::take(&mut out);
            let m = input.len();
            for i in 0..m {
                let p = input[i];
                let q = input[(i + 1) % m];
                let sp = cross(a, b, p);
                let sq = cross(a, b, q);
                let p_in = sp >= -eps;
                let q_in = sq >= -eps;
                if p_in {
                    out.push(p);
                }
                if p_in != q_in {
                    // strictly one side each, denominator bounded away from zero
                    let t = sp / (sp - sq);
                    out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
                }
            }
        }
        ConvexPolygon2D { vertices: out }
    }

    /// Area of the intersection with another convex polygon.
    pub fn intersection_area(&self, other: &ConvexPolygon2D<T>) -> T {
        let clipped = self.clip(other);
        if clipped.vertices.len() < 3 {
            return T::zero();
        }
        clipped.area().max(T::zero())
    }
}
