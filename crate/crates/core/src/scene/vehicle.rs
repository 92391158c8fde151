//! Kinematic bicycle model about the rear axle and a pure-pursuit tracker.

use serde::{Deserialize, Serialize};

use super::geometry::{OrientedBox, Pose2};

pub const WHEELBASE: f64 = 2.8;
pub const MAX_STEER: f64 = 0.6;
pub const EGO_LENGTH: f64 = 4.8;
pub const EGO_WIDTH: f64 = 2.0;
/// Rear axle to box centre.
pub const REAR_TO_CENTER: f64 = 1.4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub x: f64,
    pub y: f64,
    pub phi: f64,
    pub v: f64,
    pub a: f64,
    pub steer: f64,
}

impl EgoState {
    pub fn pose(&self) -> Pose2 {
        Pose2::new(self.x, self.y, self.phi)
    }

    pub fn curvature(&self) -> f64 {
        self.steer.tan() / WHEELBASE
    }

    pub fn yaw_rate(&self) -> f64 {
        self.v * self.curvature()
    }
}

/// Footprint of a vehicle whose rear axle sits at `pose`.
pub fn ego_box(pose: Pose2) -> OrientedBox {
    let (s, c) = pose.phi.sin_cos();
    OrientedBox {
        x: pose.x + REAR_TO_CENTER * c,
        y: pose.y + REAR_TO_CENTER * s,
        phi: pose.phi,
        length: EGO_LENGTH,
        width: EGO_WIDTH,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleLimits {
    pub max_accel: f64,
    pub max_decel: f64,
    pub max_lateral_accel: f64,
}

impl Default for VehicleLimits {
    fn default() -> Self {
        Self {
            max_accel: 1.5,
            max_decel: 3.0,
            max_lateral_accel: 3.0,
        }
    }
}

/// Integrates `substeps` Euler steps of length `dt / substeps` holding the
/// controls fixed. Speed never goes negative.
pub fn integrate(state: EgoState, accel: f64, steer: f64, dt: f64, substeps: usize) -> EgoState {
    let steer = steer.clamp(-MAX_STEER, MAX_STEER);
    let h = dt / substeps as f64;
    let mut s = EgoState { a: accel, steer, ..state };
    let k = steer.tan() / WHEELBASE;
    for _ in 0..substeps {
        let v_next = (s.v + accel * h).max(0.0);
        let v_mid = 0.5 * (s.v + v_next);
        let phi_mid = s.phi + 0.5 * v_mid * k * h;
        s.x += v_mid * phi_mid.cos() * h;
        s.y += v_mid * phi_mid.sin() * h;
        s.phi += v_mid * k * h;
        s.v = v_next;
    }
    s
}

/// Steering angle that puts `target` (world) on the rear axle's arc.
pub fn pure_pursuit(state: &EgoState, target: [f64; 2]) -> f64 {
    let local = state.pose().to_local(target);
    let ld2 = local[0] * local[0] + local[1] * local[1];
    if ld2 < 1e-9 {
        return 0.0;
    }
    let k = 2.0 * local[1] / ld2;
    (k * WHEELBASE).atan().clamp(-MAX_STEER, MAX_STEER)
}

pub fn lookahead(v: f64) -> f64 {
    (3.0 + 0.6 * v).clamp(4.0, 15.0)
}
