//! Inference: an unconditional full-sequence path, a conditional path whose
//! far-term groups stay pinned at a weakly-noised anchor prior, per-step
//! pruning to the best-scoring anchor, and guidance fusion of the two.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Denoiser, DenoiserInput};
use crate::numerics::rng::{normal_vec, stream, Purpose};
use crate::numerics::{sigmoid_value, ParamStore, Tensor};
use crate::scene::{NormalizationStats, SceneContext};
use crate::schedule::{forward_noise, solver_step, NoiseSchedule, PreviousPrediction, SolverPlan, WEAK_NOISE_T};
use crate::vocabulary::{stitch, SegmentedTrajectory, Trajectory};

/// Which anchor the unconditional path reports for fusion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnchorAlignment {
    /// Reuse the conditional path's selection.
    #[default]
    Aligned,
    /// Each path keeps its own argmax.
    Independent,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionScope {
    #[default]
    AllGroups,
    /// Far-term groups take the conditional output unchanged.
    NearOnly,
}

/// Noise of the unconditional path.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UncondNoise {
    /// One draw per segment, shared with the conditional path.
    #[default]
    PerSegment,
    /// One draw per anchor repeated over every segment.
    SharedAcrossSegments,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    /// Guidance scale `w`.
    pub cfg_scale: f64,
    /// Leading groups that form the near term; the rest are far term.
    pub near_groups: usize,
    pub weak_noise_t: f64,
    /// Model evaluations per path.
    pub steps: usize,
    pub second_order: bool,
    /// Run the conditional path and fuse; off plans with the
    /// unconditional path alone.
    pub asymmetric: bool,
    pub alignment: AnchorAlignment,
    pub fusion: FusionScope,
    pub uncond_noise: UncondNoise,
    pub seed: u64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            cfg_scale: 1.25,
            near_groups: 1,
            weak_noise_t: WEAK_NOISE_T,
            steps: 2,
            second_order: true,
            asymmetric: true,
            alignment: AnchorAlignment::Aligned,
            fusion: FusionScope::AllGroups,
            uncond_noise: UncondNoise::PerSegment,
            seed: 0,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, groups: usize) -> Result<()> {
        if !(self.cfg_scale >= 0.0) || !self.cfg_scale.is_finite() {
            return Err(Error::Config(format!("guidance scale {} must be non-negative", self.cfg_scale)));
        }
        if !(self.weak_noise_t > 0.0 && self.weak_noise_t < 1.0) {
            return Err(Error::Config(format!("weak-noise time {} outside (0, 1)", self.weak_noise_t)));
        }
        if self.asymmetric && (self.near_groups == 0 || self.near_groups >= groups) {
            return Err(Error::Config(format!(
                "near/far split {} must leave at least one group on each side of {groups}",
                self.near_groups
            )));
        }
        self.solver_plan()?;
        Ok(())
    }

    pub fn solver_plan(&self) -> Result<SolverPlan> {
        SolverPlan::uniform(self.steps, self.second_order)
    }
}

/// Start time per group and which groups stay pinned.
#[derive(Clone, Debug, PartialEq)]
pub struct PathMask {
    pub start: Vec<f64>,
    pub frozen: Vec<bool>,
}

impl PathMask {
    pub fn unconditional(groups: usize, t0: f64) -> Self {
        Self {
            start: vec![t0; groups],
            frozen: vec![false; groups],
        }
    }

    /// Near groups start at `t0`; the rest are frozen at `weak_t`.
    pub fn conditional(groups: usize, near: usize, t0: f64, weak_t: f64) -> Self {
        Self {
            start: (0..groups).map(|g| if g < near { t0 } else { weak_t }).collect(),
            frozen: (0..groups).map(|g| g >= near).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathResult {
    /// Final clean prediction of the selected anchor, flattened segments.
    pub x0: Vec<f64>,
    pub selected: usize,
    /// Confidence of the selected anchor at the final evaluation.
    pub score: f64,
    /// Confidence of every anchor at the first evaluation.
    pub first_scores: Vec<f64>,
    /// Candidates fed to each model evaluation.
    pub candidates: Vec<usize>,
    /// Selected anchor's model input at each evaluation.
    pub step_inputs: Vec<Vec<f64>>,
    /// Selected anchor's prediction at each evaluation.
    pub step_x0: Vec<Vec<f64>>,
    /// Initial noise of the selected anchor, flattened segments.
    pub noise: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanResult {
    /// Metric trajectory in the ego frame, origin included.
    pub trajectory: Trajectory,
    /// Fused normalized segments before stitching.
    pub segments: SegmentedTrajectory,
    pub selected: usize,
    pub score: f64,
    pub unconditional: PathResult,
    pub conditional: Option<PathResult>,
}

/// `(1 − w)·u + w·c` element-wise.
pub fn cfg_fuse(uncond: &[f64], cond: &[f64], w: f64) -> Result<Vec<f64>> {
    if uncond.len() != cond.len() {
        return Err(Error::Dimension(format!("fusing {} with {} values", uncond.len(), cond.len())));
    }
    Ok(uncond.iter().zip(cond).map(|(u, c)| (1.0 - w) * u + w * c).collect())
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Read-only inference state shared by both paths.
pub struct Planner<'a> {
    pub model: &'a Denoiser,
    pub params: &'a ParamStore,
    pub schedule: &'a NoiseSchedule,
    /// Normalized, tokenized anchors.
    pub anchors: &'a [SegmentedTrajectory],
    pub stats: &'a NormalizationStats,
}

impl Planner<'_> {
    fn initial_noise(&self, seed: u64, shared: bool) -> Vec<Vec<f64>> {
        let cfg = &self.model.config;
        let (n, width) = (cfg.segments, cfg.segment_values());
        let mut rng = stream(seed, Purpose::InferenceNoise, 0);
        self.anchors
            .iter()
            .map(|_| {
                if shared {
                    normal_vec(&mut rng, width).repeat(n)
                } else {
                    normal_vec(&mut rng, n * width)
                }
            })
            .collect()
    }

    /// One guidance path. `forced` replaces the argmax selection.
    pub fn run_path(
        &self,
        ctx: &SceneContext,
        mask: &PathMask,
        plan: &SolverPlan,
        seed: u64,
        shared_noise: bool,
        forced: Option<usize>,
    ) -> Result<PathResult> {
        plan.validate()?;
        let cfg = &self.model.config;
        let lay = cfg.segmentation();
        let (m, n, width) = (self.anchors.len(), cfg.segments, cfg.segment_values());
        if mask.start.len() != lay.groups || mask.frozen.len() != lay.groups {
            return Err(Error::Dimension(format!("mask covers {} groups, model has {}", mask.start.len(), lay.groups)));
        }
        for (g, (&t, &f)) in mask.start.iter().zip(&mask.frozen).enumerate() {
            if !f && t != plan.grid[0] {
                return Err(Error::Contract(format!("free group {g} starts at {t}, not at {}", plan.grid[0])));
            }
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Domain(format!("group {g} start time {t}")));
            }
        }
        if m == 0 || self.anchors.iter().any(|a| a.layout != lay) {
            return Err(Error::Dimension("anchors do not match the model layout".into()));
        }
        if let Some(k) = forced.filter(|&k| k >= m) {
            return Err(Error::Contract(format!("forced anchor {k} outside {m}")));
        }

        let per = n * width;
        let noise = self.initial_noise(seed, shared_noise);
        let mut x = Vec::with_capacity(m * per);
        for (anchor, eps) in self.anchors.iter().zip(&noise) {
            for seg in 0..n {
                let t = mask.start[lay.group_of(seg)];
                x.extend(forward_noise(self.schedule, &anchor.segment_flat(seg), t, &eps[seg * width..(seg + 1) * width])?);
            }
        }
        let frozen_cols: Vec<usize> = (0..n)
            .filter(|&seg| mask.frozen[lay.group_of(seg)])
            .flat_map(|seg| seg * width..(seg + 1) * width)
            .collect();

        let mut selected = 0;
        let mut pinned = Vec::new();
        let mut result = PathResult {
            x0: Vec::new(),
            selected: 0,
            score: 0.0,
            first_scores: Vec::new(),
            candidates: Vec::new(),
            step_inputs: Vec::new(),
            step_x0: Vec::new(),
            noise: Vec::new(),
        };
        let mut prev: Option<(Vec<f64>, f64)> = None;
        for k in 0..plan.steps() {
            let times: Vec<f64> = (0..lay.groups)
                .map(|g| if mask.frozen[g] { mask.start[g] } else { plan.grid[k] })
                .collect();
            let rows = x.len() / width;
            let segments = Tensor::new(vec![rows, width], x.clone())?;
            let (pred, logits) = self.model.predict(
                self.params,
                &DenoiserInput {
                    segments: &segments,
                    times: &times,
                    contexts: &[ctx],
                },
            )?;
            result.candidates.push(rows / n);
            let mut x0 = pred.into_data();
            let logit = if k == 0 {
                selected = forced.unwrap_or_else(|| argmax(&logits));
                result.first_scores = logits.iter().map(|&l| sigmoid_value(l)).collect();
                x = x[selected * per..(selected + 1) * per].to_vec();
                x0 = x0[selected * per..(selected + 1) * per].to_vec();
                pinned = frozen_cols.iter().map(|&c| x[c]).collect();
                logits[selected]
            } else {
                logits[0]
            };
            result.score = sigmoid_value(logit);
            result.step_inputs.push(x.clone());
            result.step_x0.push(x0.clone());
            if k + 1 < plan.steps() {
                let (t_from, t_to) = (plan.grid[k], plan.grid[k + 1]);
                let previous = match (&prev, plan.order(k)) {
                    (Some((p, t)), 2) => Some(PreviousPrediction { x0: p, t: *t }),
                    _ => None,
                };
                x = solver_step(self.schedule, &x, &x0, t_from, t_to, previous)?;
                for (&c, &v) in frozen_cols.iter().zip(&pinned) {
                    x[c] = v;
                }
            }
            prev = Some((x0.clone(), plan.grid[k]));
            result.x0 = x0;
        }
        result.selected = selected;
        result.noise = noise[selected].clone();
        Ok(result)
    }

    pub fn plan(&self, ctx: &SceneContext, gcfg: &GuidanceConfig) -> Result<PlanResult> {
        let lay = self.model.config.segmentation();
        gcfg.validate(lay.groups)?;
        let plan = gcfg.solver_plan()?;
        let shared = gcfg.uncond_noise == UncondNoise::SharedAcrossSegments;
        let uncond_mask = PathMask::unconditional(lay.groups, plan.grid[0]);

        let (fused, selected, score, unconditional, conditional) = if gcfg.asymmetric {
            let cond_mask = PathMask::conditional(lay.groups, gcfg.near_groups, plan.grid[0], gcfg.weak_noise_t);
            let c = self.run_path(ctx, &cond_mask, &plan, gcfg.seed, false, None)?;
            let forced = match gcfg.alignment {
                AnchorAlignment::Aligned => Some(c.selected),
                AnchorAlignment::Independent => None,
            };
            let u = self.run_path(ctx, &uncond_mask, &plan, gcfg.seed, shared, forced)?;
            let mut fused = cfg_fuse(&u.x0, &c.x0, gcfg.cfg_scale)?;
            if gcfg.fusion == FusionScope::NearOnly {
                let width = self.model.config.segment_values();
                let far_start = lay.group_segments(gcfg.near_groups).start * width;
                fused[far_start..].copy_from_slice(&c.x0[far_start..]);
            }
            (fused, c.selected, c.score, u, Some(c))
        } else {
            let u = self.run_path(ctx, &uncond_mask, &plan, gcfg.seed, shared, None)?;
            (u.x0.clone(), u.selected, u.score, u, None)
        };
        let segments = SegmentedTrajectory::from_flat(lay, &fused)?;
        let trajectory = self.stats.denormalize_trajectory(&stitch(&segments));
        Ok(PlanResult {
            trajectory,
            segments,
            selected,
            score,
            unconditional,
            conditional,
        })
    }
}
