//! Label assignment, group-wise decoupled noising, the hybrid loss and the
//! optimization loop.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Denoiser, DenoiserInput, DenoiserOutput};
use crate::numerics::rng::{derive_seed, normal_vec, stream, Purpose};
use crate::numerics::{checkpoint, clip_grad_norm, AdamW, AdamWConfig, Graph, ParamStore, Tensor, Var};
use crate::scene::{NormalizationStats, ScenarioRecord, SceneCaps, SceneContext};
use crate::schedule::{forward_noise, NoiseSchedule};
use crate::vocabulary::{tokenize, AnchorVocabulary, LabelAssignment, SegmentedTrajectory, Segmentation, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Classification weight.
    pub lambda: f64,
    /// Group-boundary continuity weight.
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 1.0, gamma: 0.5 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.gamma >= 0.0) {
            return Err(Error::Config(format!("loss weights must be non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// One training scenario in normalized units.
#[derive(Clone, Debug)]
pub struct Example {
    pub context: SceneContext,
    pub gt: Trajectory,
    pub gt_tokens: SegmentedTrajectory,
    pub label: LabelAssignment,
}

/// Normalizes, tokenizes and labels every record.
pub fn prepare_examples(
    records: &[ScenarioRecord],
    stats: &NormalizationStats,
    vocab: &AnchorVocabulary,
    caps: &SceneCaps,
    layout: Segmentation,
) -> Result<Vec<Example>> {
    records
        .iter()
        .map(|r| {
            let context = stats.normalize_context(&r.context(caps)?);
            let gt = stats.normalize_trajectory(&r.future());
            let gt_tokens = tokenize(&gt, layout.segments, layout.groups)?;
            let label = vocab.assign_label(&gt)?;
            Ok(Example {
                context,
                gt,
                gt_tokens,
                label,
            })
        })
        .collect()
}

pub fn tokenize_anchors(vocab: &AnchorVocabulary, layout: Segmentation) -> Result<Vec<SegmentedTrajectory>> {
    vocab
        .anchors
        .iter()
        .map(|a| tokenize(a, layout.segments, layout.groups))
        .collect()
}

/// Noised anchors of one sample: rows `(anchor, segment)` flattened.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoupledNoise {
    /// One diffusion time per macro-group.
    pub times: Vec<f64>,
    pub segments: Vec<f64>,
}

/// Group times for one sample. With `independent` false every group
/// shares one draw.
pub fn draw_group_times(rng: &mut impl Rng, groups: usize, independent: bool) -> Vec<f64> {
    if independent {
        (0..groups).map(|_| rng.random::<f64>()).collect()
    } else {
        vec![rng.random::<f64>(); groups]
    }
}

/// Noises every anchor at the given group times. With `independent` each
/// segment gets its own noise draw, so the copies of a shared boundary
/// point diverge; otherwise one draw over the stitched trajectory is
/// tokenized and the copies agree.
pub fn noise_anchors(
    schedule: &NoiseSchedule,
    anchors: &[SegmentedTrajectory],
    times: &[f64],
    rng: &mut impl Rng,
    independent: bool,
) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for anchor in anchors {
        let lay = anchor.layout;
        if times.len() != lay.groups {
            return Err(Error::Dimension(format!("{} times for {} groups", times.len(), lay.groups)));
        }
        if independent {
            for n in 0..lay.segments {
                let x0 = anchor.segment_flat(n);
                let eps = normal_vec(rng, x0.len());
                out.extend(forward_noise(schedule, &x0, times[lay.group_of(n)], &eps)?);
            }
        } else {
            let eps = Trajectory::from_flat(&normal_vec(rng, 3 * (lay.horizon + 1)))?;
            let eps = tokenize(&eps, lay.segments, lay.groups)?;
            for n in 0..lay.segments {
                let eps_n = eps.segment_flat(n);
                out.extend(forward_noise(schedule, &anchor.segment_flat(n), times[lay.group_of(n)], &eps_n)?);
            }
        }
    }
    Ok(out)
}

pub fn sample_decoupled_noise(
    schedule: &NoiseSchedule,
    anchors: &[SegmentedTrajectory],
    rng: &mut impl Rng,
    independent: bool,
) -> Result<DecoupledNoise> {
    let groups = anchors.first().map_or(1, |a| a.layout.groups);
    let times = draw_group_times(rng, groups, independent);
    let segments = noise_anchors(schedule, anchors, &times, rng, independent)?;
    Ok(DecoupledNoise { times, segments })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    /// Mean absolute error on the positive anchor.
    pub rec: f64,
    /// Weighted continuity penalty.
    pub cont: f64,
    /// Weighted classification term.
    pub bce: f64,
    pub total: f64,
}

fn check_layouts(pred: &SegmentedTrajectory, gt: &SegmentedTrajectory) -> Result<()> {
    if pred.layout != gt.layout || pred.segments.len() != gt.segments.len() {
        return Err(Error::Dimension(format!("{:?} vs {:?}", pred.layout, gt.layout)));
    }
    Ok(())
}

/// `(mean L1, γ·Σ boundary L1)` for one trajectory.
pub fn reconstruction_loss(pred: &SegmentedTrajectory, gt: &SegmentedTrajectory, gamma: f64) -> Result<(f64, f64)> {
    check_layouts(pred, gt)?;
    let (p, q) = (pred.flatten(), gt.flatten());
    let l1 = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64;
    let lay = pred.layout;
    let mut cont = 0.0;
    for g in 0..lay.groups - 1 {
        let last = lay.group_segments(g).end - 1;
        let end = pred.segments[last].last().unwrap();
        let start = pred.segments[last + 1][0];
        cont += (0..3).map(|c| (end[c] - start[c]).abs()).sum::<f64>();
    }
    Ok((l1, gamma * cont))
}

/// Numerically stable `BCE(sigmoid(logit), target)`.
pub fn bce_with_logit(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

fn check_one_hot(labels: &[f64]) -> Result<usize> {
    let ones: Vec<usize> = labels.iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(i, _)| i).collect();
    if ones.len() != 1 || labels.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Contract(format!("labels are not one-hot: {labels:?}")));
    }
    Ok(ones[0])
}

/// Hybrid loss of one sample.
pub fn total_loss(
    preds: &[SegmentedTrajectory],
    logits: &[f64],
    gt: &SegmentedTrajectory,
    labels: &[f64],
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    if preds.len() != logits.len() || preds.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} predictions, {} logits, {} labels",
            preds.len(),
            logits.len(),
            labels.len()
        )));
    }
    let k = check_one_hot(labels)?;
    let (rec, cont) = reconstruction_loss(&preds[k], gt, cfg.gamma)?;
    let bce = cfg.lambda * logits.iter().zip(labels).map(|(&l, &y)| bce_with_logit(l, y)).sum::<f64>();
    Ok(LossBreakdown {
        rec,
        cont,
        bce,
        total: rec + cont + bce,
    })
}

pub struct LossVars {
    pub total: Var,
    pub rec: Var,
    pub cont: Var,
    pub bce: Var,
}

/// Batch-mean hybrid loss on the tape. `gt` holds each sample's
/// tokenized ground truth, rows `(sample, segment)`.
pub fn total_loss_graph(
    g: &mut Graph,
    out: &DenoiserOutput,
    gt: &Tensor,
    labels: &[usize],
    layout: Segmentation,
    cfg: &LossConfig,
) -> Result<LossVars> {
    let (b, m, n) = (out.samples, out.anchors, layout.segments);
    if labels.len() != b || gt.rows() != b * n {
        return Err(Error::Dimension(format!("{} labels, {} gt rows for {b} samples", labels.len(), gt.rows())));
    }
    if let Some(&bad) = labels.iter().find(|&&k| k >= m) {
        return Err(Error::Contract(format!("label {bad} outside {m} anchors")));
    }
    let rows = |seg: usize| -> Arc<Vec<usize>> { Arc::new(labels.iter().enumerate().map(|(s, &k)| (s * m + k) * n + seg).collect()) };
    let pos_idx: Vec<usize> = labels
        .iter()
        .enumerate()
        .flat_map(|(s, &k)| (0..n).map(move |seg| (s * m + k) * n + seg))
        .collect();
    let pos = g.gather_rows(out.x0, Arc::new(pos_idx))?;
    let target = g.input(gt.clone());
    let diff = g.sub(pos, target)?;
    let diff = g.abs(diff);
    let rec = g.mean(diff);

    let width = gt.cols();
    let mut cont = g.input(Tensor::scalar(0.0));
    for grp in 0..layout.groups - 1 {
        let last = layout.group_segments(grp).end - 1;
        let a = g.gather_rows(out.x0, rows(last))?;
        let a = g.slice_cols(a, width - 3, width)?;
        let c = g.gather_rows(out.x0, rows(last + 1))?;
        let c = g.slice_cols(c, 0, 3)?;
        let d = g.sub(a, c)?;
        let d = g.abs(d);
        let s = g.sum(d);
        cont = g.add(cont, s)?;
    }
    let cont = g.scale(cont, cfg.gamma / b as f64);

    let mut targets = vec![0.0; b * m];
    for (s, &k) in labels.iter().enumerate() {
        targets[s * m + k] = 1.0;
    }
    let bce = g.bce_with_logits_sum(out.logits, targets)?;
    let bce = g.scale(bce, cfg.lambda / b as f64);
    let total = g.add(rec, cont)?;
    let total = g.add(total, bce)?;
    Ok(LossVars { total, rec, cont, bce })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: usize,
    pub max_epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub seed: u64,
    /// Per-group diffusion times; off shares one time over all groups.
    pub independent_noise: bool,
    pub loss: LossConfig,
    /// Steps between held-out evaluations; 0 disables.
    pub eval_every: usize,
    /// Evaluations without improvement before stopping; 0 never stops.
    pub patience: usize,
    /// Steps between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Linear warmup length of the learning rate.
    pub warmup_steps: usize,
    /// Cosine decay of the learning rate to `min_lr_ratio·lr` at `max_steps`.
    pub cosine_decay: bool,
    pub min_lr_ratio: f64,
    /// Independent noise draws per example in every batch.
    pub noise_repeats: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_steps: 2000,
            max_epochs: 500,
            lr: 5e-4,
            weight_decay: 0.0,
            grad_clip: 1.0,
            seed: 0,
            independent_noise: true,
            loss: LossConfig::default(),
            eval_every: 0,
            patience: 0,
            checkpoint_every: 0,
            warmup_steps: 0,
            cosine_decay: false,
            min_lr_ratio: 0.0,
            noise_repeats: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch_size == 0
            || !(self.lr > 0.0)
            || self.weight_decay < 0.0
            || self.grad_clip < 0.0
            || self.noise_repeats == 0
            || !(0.0..=1.0).contains(&self.min_lr_ratio)
        {
            return Err(Error::Config(format!("invalid optimizer settings: {self:?}")));
        }
        Ok(())
    }

    /// Learning rate of the 1-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step <= self.warmup_steps {
            return self.lr * step as f64 / (self.warmup_steps + 1) as f64;
        }
        if !self.cosine_decay || self.max_steps <= self.warmup_steps {
            return self.lr;
        }
        let progress = ((step - self.warmup_steps) as f64 / (self.max_steps - self.warmup_steps) as f64).min(1.0);
        let floor = self.min_lr_ratio * self.lr;
        floor + 0.5 * (self.lr - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub rec: f64,
    pub bce: f64,
    pub cont: f64,
    /// Fraction of samples whose highest logit is the positive anchor.
    pub acc: f64,
    pub grad_norm: f64,
}

impl StepMetrics {
    pub fn log_line(&self) -> String {
        format!(
            "step={} epoch={} loss={:.6e} rec={:.6e} bce={:.6e} cont={:.6e} acc={:.4} grad_norm={:.4e}",
            self.step, self.epoch, self.loss, self.rec, self.bce, self.cont, self.acc, self.grad_norm
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub steps: usize,
    pub history: Vec<StepMetrics>,
    /// `(step, held-out ADE)` pairs.
    pub evals: Vec<(usize, f64)>,
    /// Step whose parameters were kept, when evaluation ran.
    pub best_step: Option<usize>,
}

/// Optional side channels of [`train`].
#[derive(Default)]
pub struct TrainHooks<'a> {
    pub log: Option<&'a mut dyn Write>,
    /// Held-out ADE of the current parameters.
    pub evaluate: Option<&'a mut dyn FnMut(&ParamStore) -> Result<f64>>,
    pub checkpoint_dir: Option<&'a Path>,
}

fn log(hooks: &mut TrainHooks<'_>, line: &str) -> Result<()> {
    if let Some(w) = hooks.log.as_mut() {
        writeln!(w, "{line}").map_err(|e| Error::io("metrics log", e))?;
    }
    Ok(())
}

/// Metadata stored with every checkpoint.
pub fn checkpoint_meta(model: &Denoiser, step: usize) -> Vec<(String, String)> {
    vec![
        ("model".into(), serde_json::to_string(&model.config).expect("config serializes")),
        ("step".into(), step.to_string()),
    ]
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

/// Trains `params` in place. With an evaluator the parameters of the best
/// held-out evaluation are restored at the end.
pub fn train(
    model: &Denoiser,
    params: &mut ParamStore,
    schedule: &NoiseSchedule,
    examples: &[Example],
    anchors: &[SegmentedTrajectory],
    cfg: &TrainConfig,
    mut hooks: TrainHooks<'_>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Config("no training examples".into()));
    }
    let layout = model.config.segmentation();
    if anchors.len() != model.config.anchors || anchors.iter().any(|a| a.layout != layout) {
        return Err(Error::Dimension(format!(
            "{} anchors do not match the model's {} with layout {layout:?}",
            anchors.len(),
            model.config.anchors
        )));
    }
    let mut opt = AdamW::new(
        params,
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
    );
    let mut report = TrainReport {
        steps: 0,
        history: Vec::new(),
        evals: Vec::new(),
        best_step: None,
    };
    let mut best: Option<(f64, ParamStore)> = None;
    let mut stale = 0;
    let mut order: Vec<usize> = (0..examples.len()).collect();

    'epochs: for epoch in 0..cfg.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut stream(cfg.seed, Purpose::Shuffle, epoch as u64));
        for batch in order.chunks(cfg.batch_size) {
            if report.steps >= cfg.max_steps {
                break 'epochs;
            }
            let step = report.steps + 1;
            let batch_seed = derive_seed(cfg.seed, Purpose::TrainNoise, step as u64);
            opt.config.lr = cfg.lr_at(step);
            let metrics = train_step(model, params, &mut opt, schedule, examples, anchors, batch, batch_seed, cfg)
                .map_err(|e| match e {
                    Error::Diverged { message, .. } => Error::Diverged {
                        step,
                        batch_seed,
                        message: format!("{message}; batch examples {batch:?}"),
                    },
                    other => other,
                })?;
            let metrics = StepMetrics { step, epoch, ..metrics };
            report.steps = step;
            log(&mut hooks, &metrics.log_line())?;
            report.history.push(metrics);

            if cfg.checkpoint_every > 0 && step.is_multiple_of(cfg.checkpoint_every) {
                if let Some(dir) = hooks.checkpoint_dir {
                    checkpoint::save(&dir.join(format!("step-{step:06}.ckpt")), params, &checkpoint_meta(model, step))?;
                }
            }
            if cfg.eval_every > 0 && step.is_multiple_of(cfg.eval_every) {
                if let Some(eval) = hooks.evaluate.as_mut() {
                    let ade = eval(params)?;
                    log(&mut hooks, &format!("eval step={step} heldout_ade={ade:.6e}"))?;
                    report.evals.push((step, ade));
                    if best.as_ref().is_none_or(|(b, _)| ade < *b) {
                        best = Some((ade, params.clone()));
                        report.best_step = Some(step);
                        stale = 0;
                    } else {
                        stale += 1;
                        if cfg.patience > 0 && stale >= cfg.patience {
                            break 'epochs;
                        }
                    }
                }
            }
        }
    }
    if let Some((_, kept)) = best {
        *params = kept;
    }
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &Denoiser,
    params: &mut ParamStore,
    opt: &mut AdamW,
    schedule: &NoiseSchedule,
    examples: &[Example],
    anchors: &[SegmentedTrajectory],
    batch: &[usize],
    batch_seed: u64,
    cfg: &TrainConfig,
) -> Result<StepMetrics> {
    let layout = model.config.segmentation();
    let mut rng = stream(batch_seed, Purpose::TrainNoise, 0);
    let mut segs = Vec::new();
    let mut times = Vec::new();
    let mut gt = Vec::new();
    let mut labels = Vec::with_capacity(batch.len());
    let batch: Vec<usize> = batch.iter().flat_map(|&i| std::iter::repeat_n(i, cfg.noise_repeats)).collect();
    for &i in &batch {
        let noised = sample_decoupled_noise(schedule, anchors, &mut rng, cfg.independent_noise)?;
        segs.extend(noised.segments);
        times.extend(noised.times);
        gt.extend(examples[i].gt_tokens.flatten());
        labels.push(examples[i].label.index);
    }
    let width = model.config.segment_values();
    let segments = Tensor::new(vec![segs.len() / width, width], segs)?;
    let gt = Tensor::new(vec![gt.len() / width, width], gt)?;
    let contexts: Vec<&SceneContext> = batch.iter().map(|&i| &examples[i].context).collect();

    let (metrics, mut grads) = {
        let mut g = Graph::with_params(params);
        let out = model.forward(
            &mut g,
            &DenoiserInput {
                segments: &segments,
                times: &times,
                contexts: &contexts,
            },
        )?;
        let loss = total_loss_graph(&mut g, &out, &gt, &labels, layout, &cfg.loss)?;
        let value = |v: Var| g.value(v).item();
        let (total, rec, cont, bce) = (value(loss.total), value(loss.rec), value(loss.cont), value(loss.bce));
        if !total.is_finite() {
            return Err(Error::Diverged {
                step: 0,
                batch_seed,
                message: format!("loss {total} (rec {rec}, cont {cont}, bce {bce})"),
            });
        }
        let logits = g.value(out.logits).data();
        let m = out.anchors;
        let hits = labels
            .iter()
            .enumerate()
            .filter(|(s, &k)| argmax(&logits[s * m..(s + 1) * m]) == k)
            .count();
        g.backward(loss.total)?;
        let metrics = StepMetrics {
            step: 0,
            epoch: 0,
            loss: total,
            rec,
            bce,
            cont,
            acc: hits as f64 / labels.len() as f64,
            grad_norm: 0.0,
        };
        (metrics, g.param_grads())
    };
    let norm = clip_grad_norm(&mut grads, cfg.grad_clip);
    if !norm.is_finite() {
        return Err(Error::Diverged {
            step: 0,
            batch_seed,
            message: format!("gradient norm {norm}"),
        });
    }
    opt.step(params, &grads)?;
    Ok(StepMetrics { grad_norm: norm, ..metrics })
}

#[cfg(test)]
mod tests;
