//! Non-reactive closed-loop rollouts: agents replay their logs while the
//! ego follows its own replanned trajectories.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::route::advance;
use crate::scene::vehicle::{ego_box, EgoState, MAX_STEER, WHEELBASE};
use crate::scene::{extract_context, ScenarioRecord, SceneCaps, SceneContext, DT, HORIZON_STEPS};
use crate::vocabulary::Trajectory;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClosedLoopConfig {
    pub seconds: f64,
    pub replan_interval: f64,
    /// Lateral distance from the route centerline that ends the episode.
    pub off_route: f64,
    pub max_accel: f64,
    pub max_jerk: f64,
    pub max_lat_accel: f64,
}

impl Default for ClosedLoopConfig {
    fn default() -> Self {
        Self {
            seconds: 15.0,
            replan_interval: 0.5,
            off_route: 2.5,
            max_accel: 4.0,
            max_jerk: 8.0,
            max_lat_accel: 4.0,
        }
    }
}

impl ClosedLoopConfig {
    pub fn validate(&self) -> Result<()> {
        let horizon = HORIZON_STEPS as f64 * DT;
        let ok = self.seconds > 0.0
            && self.replan_interval >= DT - 1e-9
            && self.replan_interval <= horizon + 1e-9
            && [self.off_route, self.max_accel, self.max_jerk, self.max_lat_accel].iter().all(|v| *v > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid closed-loop settings {self:?}")))
        }
    }

    fn replan_steps(&self) -> usize {
        ((self.replan_interval / DT).round() as usize).clamp(1, HORIZON_STEPS)
    }
}

/// What a planner sees at a replanning instant.
pub struct ReplanInput<'a> {
    pub record: &'a ScenarioRecord,
    /// Simulation steps since the scenario's current time.
    pub step: usize,
    pub state: EgoState,
    /// Raw (metric) context in the frame of `state`.
    pub context: SceneContext,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub steps: usize,
    pub collided: bool,
    pub off_route: bool,
    /// Route progress relative to the expert over the same time, in `[0, 1]`.
    pub progress: f64,
    /// 1 minus half the fraction of steps over a comfort limit.
    pub comfort: f64,
    pub score: f64,
    pub states: Vec<EgoState>,
}

/// The logged expert's plan from the given replanning instant. Reproduces
/// the expert's own motion when the ego has not diverged from it.
pub fn expert_replay(input: &ReplanInput<'_>) -> Result<Trajectory> {
    let last = input.record.ego.len() - 1 - HORIZON_STEPS;
    let from = (ScenarioRecord::NOW + input.step).min(last);
    Ok(input.record.expert_future_in(from, input.state.pose()))
}

/// Moves the ego onto `target` (world) along one circular arc in `DT`.
fn track(state: &EgoState, target: [f64; 2]) -> EgoState {
    let local = state.pose().to_local(target);
    let chord = local[0].hypot(local[1]);
    if local[0] <= 1e-9 || chord < 1e-9 {
        return EgoState { v: 0.0, a: -state.v / DT, ..*state };
    }
    let max_k = MAX_STEER.tan() / WHEELBASE;
    let kappa = 2.0 * local[1] / (chord * chord);
    let k = kappa.clamp(-max_k, max_k);
    let arc = if kappa.abs() < 1e-9 { chord } else { (2.0 * local[1].atan2(local[0]) / kappa).abs() };
    let p = advance(state.pose(), k, arc);
    let v = arc / DT;
    EgoState {
        x: p.x,
        y: p.y,
        phi: p.phi,
        v,
        a: (v - state.v) / DT,
        steer: (k * WHEELBASE).atan(),
    }
}

fn collides(record: &ScenarioRecord, state: &EgoState, t: f64) -> bool {
    let ego = ego_box(state.pose());
    record.agents.iter().any(|a| ego.overlaps(&a.box_at(&record.route, t))) || record.obstacles.iter().any(|o| ego.overlaps(o))
}

/// Rolls the ego forward from the scenario's current state, replanning
/// every `replan_interval` and tracking the plan ideally in between.
pub fn run_episode(
    record: &ScenarioRecord,
    caps: &SceneCaps,
    planner: &mut dyn FnMut(&ReplanInput<'_>) -> Result<Trajectory>,
    cfg: &ClosedLoopConfig,
) -> Result<EpisodeResult> {
    cfg.validate()?;
    let available = record.ego.len() - 1 - ScenarioRecord::NOW;
    let total = ((cfg.seconds / DT).round() as usize).min(available);
    let every = cfg.replan_steps();
    let mut history: Vec<EgoState> = record.history().to_vec();
    if caps.history > history.len() {
        return Err(Error::Config(format!("history cap {} exceeds logged {}", caps.history, history.len())));
    }
    let mut state = *record.current();
    let start_s = record.route.project([state.x, state.y]).0;
    let (mut collided, mut off_route) = (false, false);
    let mut violations = 0usize;
    let mut states = vec![state];
    let mut plan: Option<(Trajectory, EgoState)> = None;
    let mut step = 0;
    while step < total {
        if step % every == 0 {
            let context = extract_context(record, &history[history.len() - caps.history..], step as f64 * DT, caps)?;
            let input = ReplanInput { record, step, state, context };
            let traj = planner(&input)?;
            if traj.points.len() != HORIZON_STEPS + 1 {
                return Err(Error::Dimension(format!(
                    "plan has {} points, expected {}",
                    traj.points.len(),
                    HORIZON_STEPS + 1
                )));
            }
            plan = Some((traj, state));
        }
        let (traj, origin) = plan.as_ref().unwrap();
        let j = step % every + 1;
        let next = track(&state, origin.pose().to_world([traj.points[j][0], traj.points[j][1]]));
        let jerk = (next.a - state.a) / DT;
        let lat = next.v * next.v * next.curvature();
        if next.a.abs() > cfg.max_accel || jerk.abs() > cfg.max_jerk || lat.abs() > cfg.max_lat_accel {
            violations += 1;
        }
        state = next;
        step += 1;
        history.push(state);
        states.push(state);
        if collides(record, &state, step as f64 * DT) {
            collided = true;
            break;
        }
        if record.route.project([state.x, state.y]).1.abs() > cfg.off_route {
            off_route = true;
            break;
        }
    }
    let ego_ds = record.route.project([state.x, state.y]).0 - start_s;
    let expert = record.ego[ScenarioRecord::NOW + step];
    let expert_ds = record.route.project([expert.x, expert.y]).0 - start_s;
    let progress = if expert_ds < 1.0 { 1.0 } else { (ego_ds / expert_ds).clamp(0.0, 1.0) };
    let comfort = 1.0 - 0.5 * violations as f64 / step.max(1) as f64;
    let score = if collided || off_route { 0.0 } else { 100.0 * progress * comfort };
    Ok(EpisodeResult {
        steps: step,
        collided,
        off_route,
        progress,
        comfort,
        score,
        states,
    })
}
