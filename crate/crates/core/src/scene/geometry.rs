//! Planar poses, rigid transforms and oriented-box overlap.

use serde::{Deserialize, Serialize};

use crate::vocabulary::wrap_angle;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub phi: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, phi: f64) -> Self {
        Self { x, y, phi }
    }

    /// World point into this pose's frame.
    pub fn to_local(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.phi.sin_cos();
        let (dx, dy) = (p[0] - self.x, p[1] - self.y);
        [c * dx + s * dy, -s * dx + c * dy]
    }

    /// Point in this pose's frame into the world.
    pub fn to_world(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.phi.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]]
    }

    /// Direction vector into this pose's frame.
    pub fn rotate_to_local(&self, v: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.phi.sin_cos();
        [c * v[0] + s * v[1], -s * v[0] + c * v[1]]
    }

    pub fn pose_to_local(&self, p: Pose2) -> Pose2 {
        let q = self.to_local([p.x, p.y]);
        Pose2::new(q[0], q[1], wrap_angle(p.phi - self.phi))
    }

    pub fn pose_to_world(&self, p: Pose2) -> Pose2 {
        let q = self.to_world([p.x, p.y]);
        Pose2::new(q[0], q[1], wrap_angle(p.phi + self.phi))
    }
}

/// Rectangle of `length × width` centred at `(x, y)` with heading `phi`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub x: f64,
    pub y: f64,
    pub phi: f64,
    pub length: f64,
    pub width: f64,
}

impl OrientedBox {
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.phi.sin_cos();
        let (hl, hw) = (0.5 * self.length, 0.5 * self.width);
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(a, b)| [self.x + c * a - s * b, self.y + s * a + c * b])
    }

    fn axes(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.phi.sin_cos();
        [[c, s], [-s, c]]
    }

    /// Separating-axis test; touching boxes count as overlapping.
    pub fn overlaps(&self, other: &OrientedBox) -> bool {
        let (ca, cb) = (self.corners(), other.corners());
        for axis in self.axes().into_iter().chain(other.axes()) {
            let proj = |cs: &[[f64; 2]; 4]| {
                cs.iter().map(|p| p[0] * axis[0] + p[1] * axis[1]).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
            };
            let (a, b) = (proj(&ca), proj(&cb));
            if a.1 < b.0 || b.1 < a.0 {
                return false;
            }
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::{stream, Purpose};
    use rand::Rng;

    fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    }

    fn segments_cross(p1: [f64; 2], p2: [f64; 2], q1: [f64; 2], q2: [f64; 2]) -> bool {
        let d1 = cross(q1, q2, p1);
        let d2 = cross(q1, q2, p2);
        let d3 = cross(p1, p2, q1);
        let d4 = cross(p1, p2, q2);
        d1 * d2 <= 0.0 && d3 * d4 <= 0.0
    }

    fn inside(p: [f64; 2], cs: &[[f64; 2]; 4]) -> bool {
        (0..4).all(|i| cross(cs[i], cs[(i + 1) % 4], p) >= 0.0)
    }

    /// Edge-intersection or containment, independent of projections.
    fn polygon_oracle(a: &OrientedBox, b: &OrientedBox) -> bool {
        let (ca, cb) = (a.corners(), b.corners());
        for i in 0..4 {
            for j in 0..4 {
                if segments_cross(ca[i], ca[(i + 1) % 4], cb[j], cb[(j + 1) % 4]) {
                    return true;
                }
            }
        }
        inside(ca[0], &cb) || inside(cb[0], &ca)
    }

    #[test]
    fn transforms_round_trip() {
        let p = Pose2::new(3.0, -2.0, 0.7);
        let q = [5.5, 1.25];
        let back = p.to_world(p.to_local(q));
        assert!((back[0] - q[0]).abs() < 1e-12 && (back[1] - q[1]).abs() < 1e-12);
        let own = p.pose_to_local(p);
        assert!(own.x.abs() < 1e-12 && own.y.abs() < 1e-12 && own.phi.abs() < 1e-12);
        let ahead = p.to_local(p.to_world([2.0, 0.0]));
        assert!((ahead[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn sat_matches_polygon_oracle() {
        let mut rng = stream(1, Purpose::Test, 9);
        let mut hits = 0;
        for _ in 0..5000 {
            let mut b = || OrientedBox {
                x: rng.random_range(-4.0..4.0),
                y: rng.random_range(-4.0..4.0),
                phi: rng.random_range(-3.2..3.2),
                length: rng.random_range(0.5..5.0),
                width: rng.random_range(0.5..2.5),
            };
            let (a, c) = (b(), b());
            let got = a.overlaps(&c);
            assert_eq!(got, polygon_oracle(&a, &c), "{a:?} {c:?}");
            hits += got as usize;
        }
        assert!(hits > 500 && hits < 4500);
    }
}
