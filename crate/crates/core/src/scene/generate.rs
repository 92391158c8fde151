//! Synthetic scenarios: a route family, parallel lanes with constant-speed
//! agents, off-road obstacles and an expert driven by a bicycle model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::geometry::{OrientedBox, Pose2};
use super::route::{RouteGeometry, RouteSegment};
use super::vehicle::{integrate, EgoState, VehicleLimits, MAX_STEER, WHEELBASE};
use crate::error::{Error, Result};
use crate::numerics::rng::{derive_seed, stream, Purpose};
use crate::vocabulary::{wrap_angle, Trajectory};

pub const DT: f64 = 0.1;
/// Logged past states including the current one.
pub const HISTORY_STEPS: usize = 20;
/// Planning horizon in steps.
pub const HORIZON_STEPS: usize = 80;
/// Logged future, long enough for a 15 s episode plus one horizon.
pub const LOG_FUTURE_STEPS: usize = 230;
pub const LANE_OFFSET: f64 = 3.5;
/// Route arc length of the ego at the current time, roughly.
const EGO_START_S: f64 = 60.0;
const EXIT_LENGTH: f64 = 600.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LaneFamily {
    Straight,
    Curve,
    LeftTurn,
    RightTurn,
}

impl LaneFamily {
    pub const ALL: [LaneFamily; 4] = [Self::Straight, Self::Curve, Self::LeftTurn, Self::RightTurn];

    pub fn name(self) -> &'static str {
        match self {
            Self::Straight => "straight",
            Self::Curve => "curve",
            Self::LeftTurn => "left-turn",
            Self::RightTurn => "right-turn",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioParams {
    pub family: LaneFamily,
    pub agents: usize,
    pub obstacles: usize,
    pub speed_limit: f64,
    pub initial_speed: f64,
    /// Distance from the current ego position to the start of the bend.
    pub approach: f64,
    pub turn_radius: f64,
    /// Signed heading change of the bend; ignored for straights.
    pub turn_angle: f64,
    /// World pose of the ego at the current time.
    pub ego_pose: Pose2,
}

impl ScenarioParams {
    pub fn straight(speed: f64) -> Self {
        Self {
            family: LaneFamily::Straight,
            agents: 0,
            obstacles: 0,
            speed_limit: speed,
            initial_speed: speed,
            approach: 0.0,
            turn_radius: 0.0,
            turn_angle: 0.0,
            ego_pose: Pose2::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.speed_limit > 0.0 && self.speed_limit.is_finite()) {
            return fail(format!("speed limit {} must be positive", self.speed_limit));
        }
        if !(0.0..=self.speed_limit).contains(&self.initial_speed) {
            return fail(format!("initial speed {} outside [0, limit]", self.initial_speed));
        }
        if self.family != LaneFamily::Straight {
            let min_radius = LANE_OFFSET + WHEELBASE / MAX_STEER.tan() + 1.0;
            if !(self.turn_radius >= min_radius) {
                return fail(format!("turn radius {} below {min_radius:.2}", self.turn_radius));
            }
            if !(self.turn_angle.abs() > 0.0 && self.turn_angle.abs() <= std::f64::consts::PI) {
                return fail(format!("turn angle {} outside (0, π]", self.turn_angle));
            }
            if !(self.approach >= 0.0) {
                return fail("approach distance must be non-negative".into());
            }
        }
        Ok(())
    }

    /// Draws a parameter set from the generator ranges.
    pub fn sample(rng: &mut impl Rng, cfg: &GeneratorConfig) -> Self {
        use std::f64::consts::FRAC_PI_2;
        let family = LaneFamily::ALL[rng.random_range(0..4)];
        let (speed_limit, approach, turn_radius, turn_angle) = match family {
            LaneFamily::Straight => (rng.random_range(6.0..15.0), 0.0, 0.0, 0.0),
            LaneFamily::Curve => {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                (
                    rng.random_range(8.0..15.0),
                    rng.random_range(0.0..30.0),
                    rng.random_range(40.0..90.0),
                    sign * rng.random_range(0.3..0.8),
                )
            }
            LaneFamily::LeftTurn | LaneFamily::RightTurn => {
                let sign = if family == LaneFamily::LeftTurn { 1.0 } else { -1.0 };
                (
                    rng.random_range(6.0..12.0),
                    rng.random_range(0.0..25.0),
                    rng.random_range(10.0..20.0),
                    sign * FRAC_PI_2,
                )
            }
        };
        let initial_speed = speed_limit * rng.random_range(0.5..1.0);
        Self {
            family,
            agents: rng.random_range(0..=cfg.max_agents),
            obstacles: rng.random_range(0..=cfg.max_obstacles),
            speed_limit,
            initial_speed,
            approach,
            turn_radius,
            turn_angle,
            ego_pose: Pose2::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub max_agents: usize,
    pub max_obstacles: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            max_agents: 6,
            max_obstacles: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgentCategory {
    Vehicle,
    Cyclist,
    Pedestrian,
}

impl AgentCategory {
    pub fn one_hot(self) -> [f64; 3] {
        match self {
            Self::Vehicle => [1.0, 0.0, 0.0],
            Self::Cyclist => [0.0, 1.0, 0.0],
            Self::Pedestrian => [0.0, 0.0, 1.0],
        }
    }
}

/// Agent moving at constant speed along the lane offset `lane_offset`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub lane_offset: f64,
    /// Lane arc length at the current time.
    pub sigma0: f64,
    pub speed: f64,
    pub length: f64,
    pub width: f64,
    pub category: AgentCategory,
}

impl AgentSpec {
    /// Centre pose at time `t` seconds from now.
    pub fn pose_at(&self, route: &RouteGeometry, t: f64) -> Pose2 {
        route.lane_pose(self.lane_offset, self.sigma0 + self.speed * t)
    }

    pub fn box_at(&self, route: &RouteGeometry, t: f64) -> OrientedBox {
        let p = self.pose_at(route, t);
        OrientedBox {
            x: p.x,
            y: p.y,
            phi: p.phi,
            length: self.length,
            width: self.width,
        }
    }
}

/// A generated scenario in world coordinates. Contexts and targets are
/// derived on demand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRecord {
    pub seed: u64,
    pub tag: String,
    pub params: ScenarioParams,
    pub route: RouteGeometry,
    pub agents: Vec<AgentSpec>,
    pub obstacles: Vec<OrientedBox>,
    /// Expert states every `DT` from `−(HISTORY_STEPS−1)·DT` to the end of
    /// the logged future.
    pub ego: Vec<EgoState>,
}

impl ScenarioRecord {
    pub const NOW: usize = HISTORY_STEPS - 1;

    pub fn current(&self) -> &EgoState {
        &self.ego[Self::NOW]
    }

    pub fn history(&self) -> &[EgoState] {
        &self.ego[..HISTORY_STEPS]
    }

    /// Expert poses from logged step `from` over one horizon, in the frame
    /// of `origin`. Point 0 is the pose at `from`.
    pub fn expert_future_in(&self, from: usize, origin: Pose2) -> Trajectory {
        let points = self.ego[from..=from + HORIZON_STEPS]
            .iter()
            .map(|s| {
                let p = origin.pose_to_local(s.pose());
                [p.x, p.y, p.phi]
            })
            .collect();
        Trajectory { points }
    }

    /// Ground-truth future in the current ego frame, starting at the origin.
    pub fn future(&self) -> Trajectory {
        let mut t = self.expert_future_in(Self::NOW, self.current().pose());
        t.points[0] = [0.0; 3];
        t
    }

    /// Rigid rotation of the whole scenario about the world origin.
    pub fn rotated(&self, angle: f64) -> Self {
        let r = Pose2::new(0.0, 0.0, angle);
        let mut out = self.clone();
        out.route.placement = r.pose_to_world(self.route.placement);
        out.params.ego_pose = r.pose_to_world(self.params.ego_pose);
        for s in &mut out.ego {
            let p = r.pose_to_world(s.pose());
            (s.x, s.y, s.phi) = (p.x, p.y, p.phi);
        }
        for o in &mut out.obstacles {
            let p = r.pose_to_world(Pose2::new(o.x, o.y, o.phi));
            (o.x, o.y, o.phi) = (p.x, p.y, p.phi);
        }
        out
    }
}

fn route_for(params: &ScenarioParams) -> Result<RouteGeometry> {
    let first = EGO_START_S + params.approach;
    let segments = if params.family == LaneFamily::Straight {
        vec![RouteSegment {
            length: first + EXIT_LENGTH,
            curvature: 0.0,
        }]
    } else {
        let k = params.turn_angle.signum() / params.turn_radius;
        vec![
            RouteSegment { length: first, curvature: 0.0 },
            RouteSegment {
                length: params.turn_angle.abs() * params.turn_radius,
                curvature: k,
            },
            RouteSegment { length: EXIT_LENGTH, curvature: 0.0 },
        ]
    };
    RouteGeometry::new(Pose2::default(), segments)
}

/// Speed the expert aims for at arc length `s`: the limit, reduced ahead
/// of bends so lateral acceleration stays bounded with a comfortable
/// braking distance.
fn target_speed(route: &RouteGeometry, s: f64, limit: f64, lim: &VehicleLimits) -> f64 {
    let mut v = limit;
    let brake = 0.6 * lim.max_decel;
    for j in 0..=40 {
        let d = 2.0 * j as f64;
        let k = route.curvature_at(s + d).abs();
        if k > 0.0 {
            let vc = (0.9 * lim.max_lateral_accel / k).sqrt();
            v = v.min((vc * vc + 2.0 * brake * d).sqrt());
        }
    }
    v
}

/// One expert control: centerline curvature feedforward with critically
/// damped lateral and heading feedback, and a proportional speed
/// controller.
pub fn expert_control(route: &RouteGeometry, state: &EgoState, limit: f64, lim: &VehicleLimits) -> (f64, f64) {
    let (s, lat) = route.project([state.x, state.y]);
    let heading_err = wrap_angle(state.phi - route.center_pose(s).phi);
    let v = state.v.max(2.0);
    let omega = 0.8;
    // Mean path curvature over the distance covered while this control is held.
    let span = state.v * DT;
    let ff = (0..10).map(|i| route.curvature_at(s + (i as f64 + 0.5) * 0.1 * span)).sum::<f64>() / 10.0;
    let k = ff - omega * omega / (v * v) * lat - 2.0 * omega / v * heading_err;
    let steer = (WHEELBASE * k).atan().clamp(-MAX_STEER, MAX_STEER);
    let vt = target_speed(route, s, limit, lim);
    let accel = (1.5 * (vt - state.v)).clamp(-lim.max_decel, lim.max_accel);
    (accel, steer)
}

fn simulate_expert(route: &RouteGeometry, params: &ScenarioParams, lim: &VehicleLimits) -> Vec<EgoState> {
    let start_s = (EGO_START_S - (HISTORY_STEPS - 1) as f64 * DT * params.initial_speed).max(1.0);
    let p = route.center_pose(start_s);
    let mut state = EgoState {
        x: p.x,
        y: p.y,
        phi: p.phi,
        v: params.initial_speed,
        a: 0.0,
        steer: 0.0,
    };
    let total = HISTORY_STEPS + LOG_FUTURE_STEPS;
    let mut out = Vec::with_capacity(total);
    for _ in 0..total {
        let (a, steer) = expert_control(route, &state, params.speed_limit, lim);
        state.a = a;
        state.steer = steer;
        out.push(state);
        state = integrate(state, a, steer, DT, 10);
    }
    out
}

/// Deterministic scenario for `seed` and `params`.
pub fn generate_scenario(seed: u64, params: &ScenarioParams) -> Result<ScenarioRecord> {
    params.validate()?;
    let lim = VehicleLimits::default();
    let mut route = route_for(params)?;
    let mut ego = simulate_expert(&route, params, &lim);
    let mut rng = stream(seed, Purpose::Scenario, 1);

    let (s_now, _) = route.project([ego[ScenarioRecord::NOW].x, ego[ScenarioRecord::NOW].y]);
    let mut agents = Vec::with_capacity(params.agents);
    for _ in 0..params.agents {
        let lane_offset = if rng.random::<bool>() { LANE_OFFSET } else { -LANE_OFFSET };
        let roll: f64 = rng.random();
        let category = if roll < 0.8 {
            AgentCategory::Vehicle
        } else if roll < 0.9 {
            AgentCategory::Cyclist
        } else {
            AgentCategory::Pedestrian
        };
        let (length, width, speed) = match category {
            AgentCategory::Vehicle => (
                rng.random_range(4.0..5.2),
                rng.random_range(1.8..2.1),
                rng.random_range(0.0..1.1 * params.speed_limit),
            ),
            AgentCategory::Cyclist => (1.8, 0.6, rng.random_range(2.0..6.0)),
            AgentCategory::Pedestrian => (0.6, 0.6, rng.random_range(0.0..1.5)),
        };
        let sigma0 = route.center_to_lane(lane_offset, s_now) + rng.random_range(-40.0..60.0);
        agents.push(AgentSpec {
            lane_offset,
            sigma0,
            speed,
            length,
            width,
            category,
        });
    }
    let mut obstacles = Vec::with_capacity(params.obstacles);
    for _ in 0..params.obstacles {
        let s = s_now + rng.random_range(-10.0..80.0);
        let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let off = side * rng.random_range(7.5..10.0);
        let c = route.center_pose(s);
        let (sn, cs) = c.phi.sin_cos();
        obstacles.push(OrientedBox {
            x: c.x - off * sn,
            y: c.y + off * cs,
            phi: wrap_angle(c.phi + rng.random_range(-0.3..0.3)),
            length: rng.random_range(1.0..3.0),
            width: rng.random_range(1.0..2.5),
        });
    }

    // Move the scene so the current ego pose lands on the requested pose.
    let now = ego[ScenarioRecord::NOW].pose();
    let rel = now.pose_to_local(Pose2::default());
    let shift = params.ego_pose.pose_to_world(rel);
    route.placement = shift.pose_to_world(route.placement);
    for s in &mut ego {
        let p = shift.pose_to_world(s.pose());
        (s.x, s.y, s.phi) = (p.x, p.y, p.phi);
    }
    for o in &mut obstacles {
        let p = shift.pose_to_world(Pose2::new(o.x, o.y, o.phi));
        (o.x, o.y, o.phi) = (p.x, p.y, p.phi);
    }
    Ok(ScenarioRecord {
        seed,
        tag: params.family.name().to_string(),
        params: *params,
        route,
        agents,
        obstacles,
        ego,
    })
}

/// `count` scenarios; scenario `i` is seeded independently of the others.
pub fn generate_corpus(count: usize, seed: u64, cfg: &GeneratorConfig) -> Result<Vec<ScenarioRecord>> {
    (0..count as u64)
        .map(|i| {
            let s = derive_seed(seed, Purpose::Scenario, i);
            let params = ScenarioParams::sample(&mut stream(s, Purpose::Scenario, 0), cfg);
            generate_scenario(s, &params)
        })
        .collect()
}
