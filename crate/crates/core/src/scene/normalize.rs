//! Per-feature statistics over valid entries and the shared x/y scaling.

use serde::{Deserialize, Serialize};

use super::context::SceneContext;
use crate::error::{Error, Result};
use crate::vocabulary::{wrap_angle, Trajectory};

/// Mean and standard deviation per feature column. Columns listed in
/// `pairs` as `(x, y)` share the x scale and keep y uncentred.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub pairs: Vec<(usize, usize)>,
    pub recenter_y: bool,
}

impl FeatureStats {
    fn from_rows<'a>(rows: impl Iterator<Item = &'a [f64]>, width: usize, pairs: Vec<(usize, usize)>, recenter_y: bool) -> Self {
        let mut n = 0usize;
        let mut sum = vec![0.0; width];
        let mut sq = vec![0.0; width];
        for r in rows {
            n += 1;
            for j in 0..width {
                sum[j] += r[j];
                sq[j] += r[j] * r[j];
            }
        }
        let mut mean = vec![0.0; width];
        let mut std = vec![1.0; width];
        if n > 0 {
            for j in 0..width {
                mean[j] = sum[j] / n as f64;
                let var = (sq[j] / n as f64 - mean[j] * mean[j]).max(0.0);
                std[j] = var.sqrt();
            }
        }
        for j in 0..width {
            // Constant columns (e.g. the ego's own pose) keep a unit scale.
            if !(std[j] > 1e-9) {
                std[j] = 1.0;
            }
        }
        for &(x, y) in &pairs {
            std[y] = std[x];
            if !recenter_y {
                mean[y] = 0.0;
            }
        }
        Self { mean, std, pairs, recenter_y }
    }

    pub fn apply(&self, row: &mut [f64]) {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - self.mean[j]) / self.std[j];
        }
    }

    pub fn invert(&self, row: &mut [f64]) {
        for (j, v) in row.iter_mut().enumerate() {
            *v = *v * self.std[j] + self.mean[j];
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub ego_history: FeatureStats,
    pub ego_state: FeatureStats,
    pub agents: FeatureStats,
    pub obstacles: FeatureStats,
    pub lanes: FeatureStats,
    pub navi: FeatureStats,
    /// `(x, y, φ)` of future waypoints.
    pub trajectory: FeatureStats,
}

impl NormalizationStats {
    /// Statistics over the valid slots of `contexts` and the future points
    /// (excluding the origin) of `futures`.
    pub fn compute(contexts: &[SceneContext], futures: &[Trajectory], recenter_y: bool) -> Result<Self> {
        let traj_rows: Vec<&[f64]> = futures.iter().flat_map(|t| t.points[1..].iter().map(|p| &p[..])).collect();
        if traj_rows.is_empty() {
            return Err(Error::Stats("no trajectories to compute statistics from".into()));
        }
        let xs: Vec<f64> = traj_rows.iter().map(|r| r[0]).collect();
        let mx = xs.iter().sum::<f64>() / xs.len() as f64;
        let vx = xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / xs.len() as f64;
        if !(vx.sqrt() > 1e-9) {
            return Err(Error::Stats("trajectory x has zero standard deviation".into()));
        }
        let xy = vec![(0, 1)];
        let fs = |rows: Vec<&[f64]>, w: usize, pairs: Vec<(usize, usize)>| FeatureStats::from_rows(rows.into_iter(), w, pairs, recenter_y);
        Ok(Self {
            ego_history: fs(contexts.iter().flat_map(|c| c.ego_history.iter().map(|r| &r[..])).collect(), 4, xy.clone()),
            ego_state: fs(contexts.iter().map(|c| &c.ego_state[..]).collect(), 10, xy.clone()),
            agents: fs(
                contexts
                    .iter()
                    .flat_map(|c| c.agents.iter().zip(&c.agent_mask).filter(|(_, &m)| m).flat_map(|(a, _)| a.iter().map(|r| &r[..])))
                    .collect(),
                9,
                xy.clone(),
            ),
            obstacles: fs(
                contexts
                    .iter()
                    .flat_map(|c| c.obstacles.iter().zip(&c.obstacle_mask).filter(|(_, &m)| m).map(|(o, _)| &o[..]))
                    .collect(),
                5,
                xy.clone(),
            ),
            lanes: fs(
                contexts
                    .iter()
                    .flat_map(|c| c.lanes.iter().zip(&c.lane_mask).filter(|(_, &m)| m).flat_map(|(l, _)| l.iter().map(|r| &r[..])))
                    .collect(),
                4,
                vec![(0, 1), (2, 3)],
            ),
            navi: fs(
                contexts
                    .iter()
                    .flat_map(|c| c.navi.iter().zip(&c.navi_mask).filter(|(_, &m)| m).flat_map(|(l, _)| l.iter().map(|r| &r[..])))
                    .collect(),
                2,
                xy.clone(),
            ),
            trajectory: fs(traj_rows, 3, xy),
        })
    }

    /// Normalized copy; padded slots stay zero.
    pub fn normalize_context(&self, ctx: &SceneContext) -> SceneContext {
        let mut out = ctx.clone();
        for r in &mut out.ego_history {
            self.ego_history.apply(r);
        }
        self.ego_state.apply(&mut out.ego_state);
        for (a, &m) in out.agents.iter_mut().zip(&ctx.agent_mask) {
            if m {
                a.iter_mut().for_each(|r| self.agents.apply(r));
            }
        }
        for (o, &m) in out.obstacles.iter_mut().zip(&ctx.obstacle_mask) {
            if m {
                self.obstacles.apply(o);
            }
        }
        for (l, &m) in out.lanes.iter_mut().zip(&ctx.lane_mask) {
            if m {
                l.iter_mut().for_each(|r| self.lanes.apply(r));
            }
        }
        for (l, &m) in out.navi.iter_mut().zip(&ctx.navi_mask) {
            if m {
                l.iter_mut().for_each(|r| self.navi.apply(r));
            }
        }
        out
    }

    pub fn normalize_trajectory(&self, t: &Trajectory) -> Trajectory {
        let mut out = t.clone();
        out.points.iter_mut().for_each(|p| self.trajectory.apply(p));
        out
    }

    /// Metric-space trajectory with wrapped headings.
    pub fn denormalize_trajectory(&self, t: &Trajectory) -> Trajectory {
        let mut out = t.clone();
        for p in &mut out.points {
            self.trajectory.invert(p);
            p[2] = wrap_angle(p[2]);
        }
        out
    }

    /// Metres per normalized unit along x and y.
    pub fn position_scale(&self) -> f64 {
        self.trajectory.std[0]
    }
}
