//! Ego-centric, fixed-capacity scene context with validity masks.

use serde::{Deserialize, Serialize};

use super::generate::{ScenarioRecord, DT, LANE_OFFSET};
use super::geometry::Pose2;
use super::vehicle::EgoState;
use crate::error::{Error, Result};

pub const EGO_HISTORY_FEATURES: usize = 4;
pub const EGO_STATE_FEATURES: usize = 10;
pub const AGENT_FEATURES: usize = 9;
pub const OBSTACLE_FEATURES: usize = 5;
pub const LANE_FEATURES: usize = 4;
pub const NAVI_FEATURES: usize = 2;

/// Slot counts of every padded modality.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneCaps {
    pub history: usize,
    pub agents: usize,
    pub obstacles: usize,
    pub map_lanes: usize,
    pub route_lanes: usize,
    pub points: usize,
    /// Spacing of polyline points in metres.
    pub point_spacing: f64,
}

impl Default for SceneCaps {
    fn default() -> Self {
        Self {
            history: 20,
            agents: 8,
            obstacles: 2,
            map_lanes: 8,
            route_lanes: 2,
            points: 20,
            point_spacing: 3.0,
        }
    }
}

/// Condition of the denoiser. Rows of padded slots are zero with mask
/// `false`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneContext {
    /// `history` rows of `(x, y, φ, v)`, oldest first.
    pub ego_history: Vec<[f64; EGO_HISTORY_FEATURES]>,
    /// `(x, y, cosφ, sinφ, v_x, v_y, a_x, a_y, steering, yaw-rate)`.
    pub ego_state: [f64; EGO_STATE_FEATURES],
    /// Per slot, `history` rows of `(x, y, φ, v, length, width, one-hot category)`.
    pub agents: Vec<Vec<[f64; AGENT_FEATURES]>>,
    pub agent_mask: Vec<bool>,
    /// `(x, y, φ, length, width)`.
    pub obstacles: Vec<[f64; OBSTACLE_FEATURES]>,
    pub obstacle_mask: Vec<bool>,
    /// Per slot, `points` rows of `(x, y, dx, dy)`.
    pub lanes: Vec<Vec<[f64; LANE_FEATURES]>>,
    pub lane_mask: Vec<bool>,
    /// Per route slot, `points` rows of `(x, y)`.
    pub navi: Vec<Vec<[f64; NAVI_FEATURES]>>,
    pub navi_mask: Vec<bool>,
}

impl SceneContext {
    pub fn empty(caps: &SceneCaps) -> Self {
        Self {
            ego_history: vec![[0.0; EGO_HISTORY_FEATURES]; caps.history],
            ego_state: [0.0; EGO_STATE_FEATURES],
            agents: vec![vec![[0.0; AGENT_FEATURES]; caps.history]; caps.agents],
            agent_mask: vec![false; caps.agents],
            obstacles: vec![[0.0; OBSTACLE_FEATURES]; caps.obstacles],
            obstacle_mask: vec![false; caps.obstacles],
            lanes: vec![vec![[0.0; LANE_FEATURES]; caps.points]; caps.map_lanes],
            lane_mask: vec![false; caps.map_lanes],
            navi: vec![vec![[0.0; NAVI_FEATURES]; caps.points]; caps.route_lanes],
            navi_mask: vec![false; caps.route_lanes],
        }
    }

    pub fn caps_match(&self, caps: &SceneCaps) -> bool {
        self.ego_history.len() == caps.history
            && self.agents.len() == caps.agents
            && self.agents.iter().all(|a| a.len() == caps.history)
            && self.obstacles.len() == caps.obstacles
            && self.lanes.len() == caps.map_lanes
            && self.lanes.iter().all(|l| l.len() == caps.points)
            && self.navi.len() == caps.route_lanes
            && self.navi.iter().all(|l| l.len() == caps.points)
    }

    pub fn max_abs_diff(&self, other: &SceneContext) -> f64 {
        fn d<const N: usize>(a: &[[f64; N]], b: &[[f64; N]]) -> f64 {
            a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
        }
        let mut m = d(&self.ego_history, &other.ego_history);
        m = m.max(d(&[self.ego_state], &[other.ego_state]));
        for (a, b) in self.agents.iter().zip(&other.agents) {
            m = m.max(d(a, b));
        }
        m = m.max(d(&self.obstacles, &other.obstacles));
        for (a, b) in self.lanes.iter().zip(&other.lanes) {
            m = m.max(d(a, b));
        }
        for (a, b) in self.navi.iter().zip(&other.navi) {
            m = m.max(d(a, b));
        }
        m
    }
}

/// Distance key for nearest-first ordering, coarse enough that rigid
/// transforms of the scene do not reorder ties.
fn rank(d: f64) -> i64 {
    (d * 1e6).round() as i64
}

fn polyline_features(frame: &Pose2, pts: &[[f64; 2]]) -> Vec<[f64; LANE_FEATURES]> {
    let local: Vec<[f64; 2]> = pts.iter().map(|p| frame.to_local(*p)).collect();
    (0..local.len())
        .map(|i| {
            let (a, b) = if i + 1 < local.len() { (local[i], local[i + 1]) } else { (local[i - 1], local[i]) };
            [local[i][0], local[i][1], b[0] - a[0], b[1] - a[1]]
        })
        .collect()
}

/// Context seen by an ego with the given state history at time `t_now`
/// (seconds from the scenario's current time).
pub fn extract_context(record: &ScenarioRecord, history: &[EgoState], t_now: f64, caps: &SceneCaps) -> Result<SceneContext> {
    if history.len() != caps.history || caps.points < 2 {
        return Err(Error::Dimension(format!(
            "context needs {} history states, got {}",
            caps.history,
            history.len()
        )));
    }
    let cur = history.last().unwrap();
    let frame = cur.pose();
    let mut ctx = SceneContext::empty(caps);

    for (row, s) in ctx.ego_history.iter_mut().zip(history) {
        let p = frame.pose_to_local(s.pose());
        *row = [p.x, p.y, p.phi, s.v];
    }
    let k = cur.curvature();
    ctx.ego_state = [0.0, 0.0, 1.0, 0.0, cur.v, 0.0, cur.a, cur.v * cur.v * k, cur.steer, cur.v * k];

    let route = &record.route;
    let mut by_dist: Vec<(f64, usize)> = record
        .agents
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let p = a.pose_at(route, t_now);
            ((p.x - frame.x).hypot(p.y - frame.y), i)
        })
        .collect();
    by_dist.sort_by_key(|&(d, i)| (rank(d), i));
    for (slot, &(_, i)) in by_dist.iter().take(caps.agents).enumerate() {
        let a = &record.agents[i];
        let cat = a.category.one_hot();
        for (j, row) in ctx.agents[slot].iter_mut().enumerate() {
            let t = t_now - (caps.history - 1 - j) as f64 * DT;
            let p = frame.pose_to_local(a.pose_at(route, t));
            *row = [p.x, p.y, p.phi, a.speed, a.length, a.width, cat[0], cat[1], cat[2]];
        }
        ctx.agent_mask[slot] = true;
    }

    let mut obs: Vec<(f64, usize)> = record
        .obstacles
        .iter()
        .enumerate()
        .map(|(i, o)| ((o.x - frame.x).hypot(o.y - frame.y), i))
        .collect();
    obs.sort_by_key(|&(d, i)| (rank(d), i));
    for (slot, &(_, i)) in obs.iter().take(caps.obstacles).enumerate() {
        let o = &record.obstacles[i];
        let p = frame.pose_to_local(Pose2::new(o.x, o.y, o.phi));
        ctx.obstacles[slot] = [p.x, p.y, p.phi, o.length, o.width];
        ctx.obstacle_mask[slot] = true;
    }

    let (s_ego, _) = route.project([frame.x, frame.y]);
    let piece = (caps.points - 1) as f64 * caps.point_spacing;
    let mut pieces: Vec<(f64, usize, Vec<[f64; 2]>)> = Vec::new();
    for d in [-LANE_OFFSET, 0.0, LANE_OFFSET] {
        let sigma = route.center_to_lane(d, s_ego);
        let first = ((sigma - 2.0 * piece) / piece).floor() as i64;
        for j in first..=first + 4 {
            let pts: Vec<[f64; 2]> = (0..caps.points)
                .map(|i| {
                    let p = route.lane_pose(d, j as f64 * piece + i as f64 * caps.point_spacing);
                    [p.x, p.y]
                })
                .collect();
            let dist = pts.iter().map(|p| (p[0] - frame.x).hypot(p[1] - frame.y)).fold(f64::INFINITY, f64::min);
            let order = pieces.len();
            pieces.push((dist, order, pts));
        }
    }
    pieces.sort_by_key(|p| (rank(p.0), p.1));
    for (slot, (_, _, pts)) in pieces.iter().take(caps.map_lanes).enumerate() {
        ctx.lanes[slot] = polyline_features(&frame, pts);
        ctx.lane_mask[slot] = true;
    }

    for slot in 0..caps.route_lanes {
        for i in 0..caps.points {
            let s = s_ego + (slot * (caps.points - 1) + i) as f64 * caps.point_spacing;
            let p = route.center_pose(s);
            let q = frame.to_local([p.x, p.y]);
            ctx.navi[slot][i] = [q[0], q[1]];
        }
        ctx.navi_mask[slot] = true;
    }
    Ok(ctx)
}

impl ScenarioRecord {
    /// Context at the scenario's current time.
    pub fn context(&self, caps: &SceneCaps) -> Result<SceneContext> {
        let n = self.history().len();
        if caps.history > n {
            return Err(Error::Config(format!("history cap {} exceeds logged {n}", caps.history)));
        }
        extract_context(self, &self.history()[n - caps.history..], 0.0, caps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::generate::{generate_corpus, generate_scenario, GeneratorConfig, ScenarioParams};

    #[test]
    fn current_pose_is_the_origin() {
        let corpus = generate_corpus(4, 2, &GeneratorConfig::default()).unwrap();
        for r in corpus {
            let c = r.context(&SceneCaps::default()).unwrap();
            let last = c.ego_history.last().unwrap();
            assert!(last[0].abs() < 1e-12 && last[1].abs() < 1e-12 && last[2].abs() < 1e-12);
            assert!(c.caps_match(&SceneCaps::default()));
            assert_eq!(c.agent_mask.iter().filter(|&&m| m).count(), r.agents.len().min(8));
            assert!(c.navi_mask.iter().all(|&m| m));
            // Navi starts at the ego's projection and runs ahead.
            assert!(c.navi[0][0][0].abs() < 1.0 && c.navi[0][0][1].abs() < 1.0);
            assert!(c.navi[1][19][0] > 30.0 || r.tag != "straight");
        }
    }

    #[test]
    fn frame_invariance_under_rotation() {
        let corpus = generate_corpus(6, 5, &GeneratorConfig::default()).unwrap();
        for r in &corpus {
            let base = r.context(&SceneCaps::default()).unwrap();
            for angle in [0.3, -2.0, 3.1] {
                let rot = r.rotated(angle).context(&SceneCaps::default()).unwrap();
                assert_eq!(base.agent_mask, rot.agent_mask);
                assert!(base.max_abs_diff(&rot) < 1e-9, "{}", base.max_abs_diff(&rot));
                let (f0, f1) = (r.future(), r.rotated(angle).future());
                for (a, b) in f0.points.iter().zip(&f1.points) {
                    for c in 0..3 {
                        assert!((a[c] - b[c]).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn straight_lane_pieces_are_axis_aligned() {
        let r = generate_scenario(0, &ScenarioParams::straight(8.0)).unwrap();
        let c = r.context(&SceneCaps::default()).unwrap();
        for lane in &c.lanes {
            for p in lane {
                assert!((p[2] - 3.0).abs() < 1e-9 && p[3].abs() < 1e-9);
                assert!([-3.5, 0.0, 3.5].iter().any(|d| (p[1] - d).abs() < 1e-9));
            }
        }
        assert!(c.obstacle_mask.iter().all(|&m| !m));
    }
}
