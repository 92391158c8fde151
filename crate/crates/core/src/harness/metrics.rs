use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::closed_loop::{run_episode, ClosedLoopConfig, ReplanInput};
use super::{RunConfig, Trained};
use crate::error::{Error, Result};
use crate::guidance::GuidanceConfig;
use crate::scene::vehicle::ego_box;
use crate::scene::{geometry::Pose2, ScenarioRecord, DT};
use crate::vocabulary::{SegmentedTrajectory, Trajectory};

/// `(ADE, FDE)` over the future points `1..=T_h`, positions only.
pub fn ade_fde(pred: &Trajectory, gt: &Trajectory) -> Result<(f64, f64)> {
    if pred.points.len() != gt.points.len() || pred.points.len() < 2 {
        return Err(Error::Dimension(format!("{} vs {} points", pred.points.len(), gt.points.len())));
    }
    let d: Vec<f64> = pred.points[1..]
        .iter()
        .zip(&gt.points[1..])
        .map(|(p, q)| (p[0] - q[0]).hypot(p[1] - q[1]))
        .collect();
    Ok((d.iter().sum::<f64>() / d.len() as f64, *d.last().unwrap()))
}

/// Whether the ego footprint along `plan` (ego frame at the record's
/// current time, one point per step) overlaps any agent's logged box at
/// the same time or any static obstacle.
pub fn plan_collides(record: &ScenarioRecord, plan: &Trajectory) -> bool {
    let origin = record.current().pose();
    plan.points.iter().enumerate().any(|(i, p)| {
        let ego = ego_box(origin.pose_to_world(Pose2::new(p[0], p[1], p[2])));
        let t = i as f64 * DT;
        record.agents.iter().any(|a| ego.overlaps(&a.box_at(&record.route, t))) || record.obstacles.iter().any(|o| ego.overlaps(o))
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpenLoopMetrics {
    pub ade: f64,
    pub fde: f64,
    /// Largest position gap between consecutive groups before stitching.
    pub gap: f64,
    pub collision: bool,
    /// Mean absolute offset of the plan from the route centerline.
    pub lateral: f64,
}

/// Metrics of a metric-space plan. `segments` are the plan's normalized
/// pre-stitch segments and `position_scale` converts them to metres.
pub fn open_loop_metrics(
    record: &ScenarioRecord,
    plan: &Trajectory,
    segments: Option<&SegmentedTrajectory>,
    position_scale: f64,
) -> Result<OpenLoopMetrics> {
    let (ade, fde) = ade_fde(plan, &record.future())?;
    let gap = segments.map_or(0.0, |s| s.max_group_gap() * position_scale);
    let origin = record.current().pose();
    let lateral = plan.points[1..]
        .iter()
        .map(|p| record.route.project(origin.to_world([p[0], p[1]])).1.abs())
        .sum::<f64>()
        / (plan.points.len() - 1) as f64;
    Ok(OpenLoopMetrics {
        ade,
        fde,
        gap,
        collision: plan_collides(record, plan),
        lateral,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMetrics {
    pub index: usize,
    pub tag: String,
    pub open_loop: OpenLoopMetrics,
    pub selected: usize,
    pub score: f64,
    pub closed_loop: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenarios: Vec<ScenarioMetrics>,
    pub ade: f64,
    pub fde: f64,
    pub gap: f64,
    pub collision_rate: f64,
    pub lateral: f64,
    pub closed_loop: Option<f64>,
    pub composite: f64,
}

/// Score in `[0, 100]`: open-loop accuracy discounted by collisions,
/// averaged with the closed-loop score when one exists.
pub fn composite_score(ade: f64, collision_rate: f64, closed_loop: Option<f64>) -> f64 {
    let open = 100.0 * (-ade.max(0.0) / 2.0).exp() * (1.0 - collision_rate.clamp(0.0, 1.0));
    let s = match closed_loop {
        Some(c) => 0.5 * open + 0.5 * c.clamp(0.0, 100.0),
        None => open,
    };
    s.clamp(0.0, 100.0)
}

impl EvalReport {
    pub fn from_scenarios(scenarios: Vec<ScenarioMetrics>) -> Self {
        let n = scenarios.len().max(1) as f64;
        let mean = |f: &dyn Fn(&ScenarioMetrics) -> f64| scenarios.iter().map(f).sum::<f64>() / n;
        let ade = mean(&|s| s.open_loop.ade);
        let collision_rate = mean(&|s| f64::from(u8::from(s.open_loop.collision)));
        let closed_loop = if !scenarios.is_empty() && scenarios.iter().all(|s| s.closed_loop.is_some()) {
            Some(mean(&|s| s.closed_loop.unwrap()))
        } else {
            None
        };
        Self {
            ade,
            fde: mean(&|s| s.open_loop.fde),
            gap: mean(&|s| s.open_loop.gap),
            collision_rate,
            lateral: mean(&|s| s.open_loop.lateral),
            composite: composite_score(ade, collision_rate, closed_loop),
            closed_loop,
            scenarios,
        }
    }

    /// Structured text: a header, aggregate `key=value` lines, then one
    /// line per scenario.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("# tddm evaluation report\n");
        out.push_str("# closed-loop scores come from a non-reactive desk simulator; they are not comparable to benchmark leaderboard scores\n");
        let cl = self.closed_loop.map_or("none".to_string(), |c| format!("{c:.6}"));
        let _ = writeln!(out, "scenarios={}", self.scenarios.len());
        let _ = writeln!(out, "ade_m={:.6}", self.ade);
        let _ = writeln!(out, "fde_m={:.6}", self.fde);
        let _ = writeln!(out, "gap_m={:.6}", self.gap);
        let _ = writeln!(out, "collision_rate={:.6}", self.collision_rate);
        let _ = writeln!(out, "lateral_m={:.6}", self.lateral);
        let _ = writeln!(out, "closed_loop={cl}");
        let _ = writeln!(out, "composite={:.6}", self.composite);
        for s in &self.scenarios {
            let m = &s.open_loop;
            let cl = s.closed_loop.map_or("none".to_string(), |c| format!("{c:.6}"));
            let _ = writeln!(
                out,
                "scenario index={} tag={} ade_m={:.6} fde_m={:.6} gap_m={:.6} collision={} lateral_m={:.6} selected={} score={:.6} closed_loop={cl}",
                s.index, s.tag, m.ade, m.fde, m.gap, m.collision, m.lateral, s.selected, s.score
            );
        }
        out
    }
}

/// Open-loop metrics for every record and, when enabled, one closed-loop
/// episode each.
pub fn evaluate(trained: &Trained, records: &[ScenarioRecord], cfg: &RunConfig, gcfg: &GuidanceConfig) -> Result<EvalReport> {
    let caps = cfg.model.caps;
    let limit = if cfg.eval.max_scenarios == 0 { records.len() } else { cfg.eval.max_scenarios.min(records.len()) };
    let scale = trained.stats.position_scale();
    let mut scenarios = Vec::with_capacity(limit);
    for (index, record) in records[..limit].iter().enumerate() {
        let plan = trained.plan(&record.context(&caps)?, gcfg)?;
        let open_loop = open_loop_metrics(record, &plan.trajectory, Some(&plan.segments), scale)?;
        let closed_loop = if cfg.eval.closed_loop {
            Some(closed_loop_score(trained, record, gcfg, &cfg.eval.episode)?)
        } else {
            None
        };
        scenarios.push(ScenarioMetrics {
            index,
            tag: record.tag.clone(),
            open_loop,
            selected: plan.selected,
            score: plan.score,
            closed_loop,
        });
    }
    Ok(EvalReport::from_scenarios(scenarios))
}

pub fn closed_loop_score(trained: &Trained, record: &ScenarioRecord, gcfg: &GuidanceConfig, cfg: &ClosedLoopConfig) -> Result<f64> {
    let mut planner = |input: &ReplanInput<'_>| Ok(trained.plan(&input.context, gcfg)?.trajectory);
    Ok(run_episode(record, &trained.model.config.caps, &mut planner, cfg)?.score)
}
