//! Piecewise straight/arc route centerline with parallel lanes.

use serde::{Deserialize, Serialize};

use super::geometry::Pose2;
use crate::error::{Error, Result};

/// Constant-curvature piece; `curvature = 0` is a straight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteSegment {
    pub length: f64,
    pub curvature: f64,
}

/// Centerline defined in its own frame (start at the origin heading +x)
/// and placed in the world by `placement`. Arc length beyond either end
/// continues along the end headings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteGeometry {
    pub placement: Pose2,
    pub segments: Vec<RouteSegment>,
}

impl RouteGeometry {
    pub fn new(placement: Pose2, segments: Vec<RouteSegment>) -> Result<Self> {
        if segments.is_empty() || segments.iter().any(|s| !(s.length > 0.0)) {
            return Err(Error::Config("route segments need positive length".into()));
        }
        if segments[0].curvature != 0.0 || segments.last().unwrap().curvature != 0.0 {
            return Err(Error::Config("route must begin and end with a straight".into()));
        }
        Ok(Self { placement, segments })
    }

    pub fn total_length(&self) -> f64 {
        self.segments.iter().map(|s| s.length).sum()
    }

    /// Local start pose and arc-length offset of every segment.
    fn starts(&self) -> Vec<(Pose2, f64)> {
        let mut out = Vec::with_capacity(self.segments.len());
        let mut pose = Pose2::default();
        let mut s0 = 0.0;
        for seg in &self.segments {
            out.push((pose, s0));
            pose = advance(pose, seg.curvature, seg.length);
            s0 += seg.length;
        }
        out
    }

    fn locate(&self, s: f64) -> (usize, f64) {
        let mut acc = 0.0;
        for (i, seg) in self.segments.iter().enumerate() {
            if s < acc + seg.length || i + 1 == self.segments.len() {
                return (i, s - acc);
            }
            acc += seg.length;
        }
        unreachable!()
    }

    fn local_pose(&self, s: f64) -> (Pose2, f64) {
        let starts = self.starts();
        if s < 0.0 {
            return (advance(Pose2::default(), 0.0, s), 0.0);
        }
        let (i, ds) = self.locate(s);
        let k = self.segments[i].curvature;
        (advance(starts[i].0, k, ds), k)
    }

    /// Centerline pose at arc length `s`, world frame.
    pub fn center_pose(&self, s: f64) -> Pose2 {
        self.placement.pose_to_world(self.local_pose(s).0)
    }

    pub fn curvature_at(&self, s: f64) -> f64 {
        if s < 0.0 || s > self.total_length() {
            0.0
        } else {
            self.local_pose(s).1
        }
    }

    /// Pose on the lane offset `d` to the left of the centerline, addressed
    /// by arc length `sigma` measured along that lane.
    pub fn lane_pose(&self, d: f64, sigma: f64) -> Pose2 {
        let s = self.lane_to_center(d, sigma);
        let c = self.center_pose(s);
        let (sn, cs) = c.phi.sin_cos();
        Pose2::new(c.x - d * sn, c.y + d * cs, c.phi)
    }

    /// Lane arc length of centerline position `s` on offset `d`.
    pub fn center_to_lane(&self, d: f64, s: f64) -> f64 {
        if s <= 0.0 {
            return s;
        }
        let mut sigma = 0.0;
        let mut acc = 0.0;
        for seg in &self.segments {
            let take = (s - acc).min(seg.length);
            sigma += take * (1.0 - seg.curvature * d);
            acc += seg.length;
            if s <= acc {
                return sigma;
            }
        }
        sigma + (s - acc)
    }

    pub fn lane_to_center(&self, d: f64, sigma: f64) -> f64 {
        if sigma <= 0.0 {
            return sigma;
        }
        let mut lane_acc = 0.0;
        let mut acc = 0.0;
        for seg in &self.segments {
            let f = 1.0 - seg.curvature * d;
            let lane_len = seg.length * f;
            if sigma <= lane_acc + lane_len {
                return acc + (sigma - lane_acc) / f;
            }
            lane_acc += lane_len;
            acc += seg.length;
        }
        acc + (sigma - lane_acc)
    }

    /// Closest centerline arc length and signed lateral offset (left
    /// positive) of a world point.
    pub fn project(&self, p: [f64; 2]) -> (f64, f64) {
        let q = self.placement.to_local(p);
        let starts = self.starts();
        let last = self.segments.len() - 1;
        let mut best = (0.0, 0.0, f64::INFINITY);
        for (i, (seg, (start, s0))) in self.segments.iter().zip(&starts).enumerate() {
            let local = start.to_local(q);
            let (ds, lat) = if seg.curvature == 0.0 {
                let lo = if i == 0 { f64::NEG_INFINITY } else { 0.0 };
                let hi = if i == last { f64::INFINITY } else { seg.length };
                (local[0].clamp(lo, hi), local[1])
            } else {
                let r = 1.0 / seg.curvature;
                // arc centre at (0, r) in the segment frame
                let (vx, vy) = (local[0], local[1] - r);
                let ang = if r > 0.0 { vx.atan2(-vy) } else { vx.atan2(vy) };
                let ds = (ang * r.abs()).clamp(0.0, seg.length);
                let dist = vx.hypot(vy);
                (ds, if r > 0.0 { r - dist } else { r + dist })
            };
            let foot = advance(*start, seg.curvature, ds);
            let err = (foot.x - q[0]).hypot(foot.y - q[1]);
            if err < best.2 {
                let (sn, cs) = foot.phi.sin_cos();
                let lateral = if seg.curvature == 0.0 || (ds > 0.0 && ds < seg.length) {
                    lat
                } else {
                    -(q[0] - foot.x) * sn + (q[1] - foot.y) * cs
                };
                best = (s0 + ds, lateral, err);
            }
        }
        (best.0, best.1)
    }
}

/// Pose after driving `ds` along constant curvature `k`.
pub fn advance(p: Pose2, k: f64, ds: f64) -> Pose2 {
    let (s, c) = p.phi.sin_cos();
    if k.abs() < 1e-12 {
        return Pose2::new(p.x + c * ds, p.y + s * ds, p.phi);
    }
    let phi = p.phi + k * ds;
    Pose2::new(
        p.x + (phi.sin() - s) / k,
        p.y - (phi.cos() - c) / k,
        phi,
    )
}
