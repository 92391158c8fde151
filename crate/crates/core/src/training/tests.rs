use super::*;
use crate::model::ModelConfig;
use crate::numerics::gradcheck::{central_difference, max_relative_error};
use crate::vocabulary::{ClusterFeature, Waypoint};

fn traj(f: impl Fn(usize) -> Waypoint, horizon: usize) -> Trajectory {
    Trajectory::new((0..=horizon).map(f).collect()).unwrap()
}

fn seg(t: &Trajectory, n: usize, g: usize) -> SegmentedTrajectory {
    tokenize(t, n, g).unwrap()
}

fn random_traj(rng: &mut impl Rng, horizon: usize) -> Trajectory {
    Trajectory::from_flat(&normal_vec(rng, 3 * (horizon + 1))).unwrap()
}

#[test]
fn single_group_shares_time_but_not_noise() {
    let s = NoiseSchedule::default();
    let a = seg(&traj(|i| [i as f64, 0.0, 0.0], 8), 4, 1);
    let mut rng = stream(1, Purpose::Test, 0);
    let out = sample_decoupled_noise(&s, std::slice::from_ref(&a), &mut rng, true).unwrap();
    assert_eq!(out.times.len(), 1);
    let noised = SegmentedTrajectory::from_flat(a.layout, &out.segments).unwrap();
    // Shared boundary copies got different draws.
    assert_ne!(noised.segments[0].last(), noised.segments[1].first());
}

#[test]
fn zero_time_leaves_anchors_clean() {
    let s = NoiseSchedule::default();
    let a = seg(&traj(|i| [i as f64, 0.5, -0.1], 8), 4, 2);
    let mut rng = stream(2, Purpose::Test, 0);
    for independent in [true, false] {
        let out = noise_anchors(&s, &[a.clone(), a.clone()], &[0.0, 0.0], &mut rng, independent).unwrap();
        let mut clean = a.flatten();
        clean.extend(a.flatten());
        assert_eq!(out, clean);
    }
    assert!(matches!(noise_anchors(&s, &[a], &[0.0], &mut rng, true), Err(Error::Dimension(_))));
}

#[test]
fn group_times_are_uniform() {
    let mut rng = stream(3, Purpose::Test, 0);
    let n = 100_000;
    let mut sum = 0.0;
    for _ in 0..n / 2 {
        sum += draw_group_times(&mut rng, 2, true).iter().sum::<f64>();
    }
    let mean = sum / n as f64;
    assert!((0.49..=0.51).contains(&mean), "{mean}");
}

#[test]
fn segments_of_a_group_share_one_noise_level() {
    let s = NoiseSchedule::default();
    let big = 1e6;
    let a = seg(&traj(|_| [big, big, big], 8), 4, 2);
    let mut rng = stream(4, Purpose::Test, 0);
    for independent in [true, false] {
        let out = sample_decoupled_noise(&s, &[a.clone(), a.clone()], &mut rng, independent).unwrap();
        let per = a.layout.seg_points() * 3;
        for (row, chunk) in out.segments.chunks(per).enumerate() {
            let n = row % 4;
            let alpha = s.alpha(out.times[a.layout.group_of(n)]).unwrap();
            for v in chunk {
                assert!((v / big - alpha).abs() < 1e-4);
            }
        }
        if !independent {
            assert_eq!(out.times[0], out.times[1]);
            let noised = SegmentedTrajectory::from_flat(a.layout, &out.segments[..4 * per]).unwrap();
            for n in 0..3 {
                assert_eq!(noised.segments[n].last(), noised.segments[n + 1].first());
            }
        }
    }
}

#[test]
fn reconstruction_examples() {
    let zero = seg(&traj(|_| [0.0; 3], 8), 4, 2);
    let ones = seg(&traj(|_| [1.0; 3], 8), 4, 2);
    assert_eq!(reconstruction_loss(&zero, &zero, 1.0).unwrap(), (0.0, 0.0));
    // Every value is off by one; the boundary copies agree.
    assert_eq!(reconstruction_loss(&ones, &zero, 0.0).unwrap(), (1.0, 0.0));
    assert_eq!(reconstruction_loss(&ones, &zero, 3.0).unwrap().1, 0.0);

    let mut shifted = zero.clone();
    shifted.segments[1].last_mut().unwrap()[0] = 1.0;
    let (l1, cont) = reconstruction_loss(&shifted, &zero, 2.0).unwrap();
    assert_eq!(cont, 2.0);
    assert!((l1 - 1.0 / 36.0).abs() < 1e-15);

    let other = seg(&traj(|_| [0.0; 3], 8), 2, 2);
    assert!(matches!(reconstruction_loss(&other, &zero, 0.0), Err(Error::Dimension(_))));
}

#[test]
fn total_loss_examples() {
    let gt = seg(&traj(|i| [i as f64, 0.2, 0.0], 8), 4, 2);
    let m = 20;
    let preds = vec![gt.clone(); m];
    let mut labels = vec![0.0; m];
    labels[3] = 1.0;
    let confident: Vec<f64> = labels.iter().map(|&y| if y == 1.0 { 1e3 } else { -1e3 }).collect();
    let cfg = LossConfig::default();
    assert_eq!(total_loss(&preds, &confident, &gt, &labels, &cfg).unwrap().total, 0.0);

    let half = vec![0.0; m];
    let l = total_loss(&preds, &half, &gt, &labels, &LossConfig { lambda: 1.0, gamma: 0.5 }).unwrap();
    assert!((l.total - 20.0 * 2f64.ln()).abs() < 1e-12);

    let logits: Vec<f64> = (0..m).map(|i| (i as f64 - 7.0) * 0.3).collect();
    let a = total_loss(&preds, &logits, &gt, &labels, &LossConfig { lambda: 1.0, gamma: 0.5 }).unwrap();
    let b = total_loss(&preds, &logits, &gt, &labels, &LossConfig { lambda: 2.0, gamma: 0.5 }).unwrap();
    assert_eq!(b.bce, 2.0 * a.bce);
    assert_eq!(a.rec + a.cont, b.rec + b.cont);

    let mut two = labels.clone();
    two[4] = 1.0;
    assert!(matches!(total_loss(&preds, &logits, &gt, &two, &cfg), Err(Error::Contract(_))));
    let soft: Vec<f64> = labels.iter().map(|v| v * 0.5).collect();
    assert!(matches!(total_loss(&preds, &logits, &gt, &soft, &cfg), Err(Error::Contract(_))));
}

#[test]
fn bce_matches_direct_formula() {
    for &(x, y) in &[(0.3, 1.0), (-2.0, 0.0), (4.0, 0.0), (-0.7, 1.0)] {
        let p = 1.0 / (1.0 + f64::exp(-x));
        let direct = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
        assert!((bce_with_logit(x, y) - direct).abs() < 1e-12);
    }
}

struct Fixture {
    layout: Segmentation,
    preds: Vec<f64>,
    logits: Vec<f64>,
    gt: Vec<f64>,
    labels: Vec<usize>,
    samples: usize,
    anchors: usize,
}

fn fixture() -> Fixture {
    let layout = Segmentation::new(8, 4, 2).unwrap();
    let (samples, anchors) = (3, 4);
    let mut rng = stream(5, Purpose::Test, 0);
    let width = layout.seg_points() * 3;
    Fixture {
        layout,
        preds: normal_vec(&mut rng, samples * anchors * 4 * width),
        logits: normal_vec(&mut rng, samples * anchors),
        gt: normal_vec(&mut rng, samples * 4 * width),
        labels: vec![1, 3, 0],
        samples,
        anchors,
    }
}

fn graph_loss(f: &Fixture, preds: &[f64], logits: &[f64], cfg: &LossConfig) -> (f64, Vec<f64>, Vec<f64>) {
    let width = f.layout.seg_points() * 3;
    let mut g = Graph::new();
    let x0 = g.leaf(Tensor::new(vec![preds.len() / width, width], preds.to_vec()).unwrap());
    let lg = g.leaf(Tensor::new(vec![logits.len(), 1], logits.to_vec()).unwrap());
    let out = DenoiserOutput {
        x0,
        logits: lg,
        samples: f.samples,
        anchors: f.anchors,
    };
    let gt = Tensor::new(vec![f.gt.len() / width, width], f.gt.clone()).unwrap();
    let loss = total_loss_graph(&mut g, &out, &gt, &f.labels, f.layout, cfg).unwrap();
    let value = g.value(loss.total).item();
    g.backward(loss.total).unwrap();
    (value, g.grad(x0).unwrap().data().to_vec(), g.grad(lg).unwrap().data().to_vec())
}

#[test]
fn graph_loss_matches_per_sample_oracle() {
    let f = fixture();
    let cfg = LossConfig { lambda: 0.7, gamma: 1.3 };
    let per_sample = f.anchors * 4 * f.layout.seg_points() * 3;
    let mut expected = 0.0;
    for s in 0..f.samples {
        let preds: Vec<_> = f.preds[s * per_sample..(s + 1) * per_sample]
            .chunks(per_sample / f.anchors)
            .map(|c| SegmentedTrajectory::from_flat(f.layout, c).unwrap())
            .collect();
        let gt_len = per_sample / f.anchors;
        let gt = SegmentedTrajectory::from_flat(f.layout, &f.gt[s * gt_len..(s + 1) * gt_len]).unwrap();
        let mut labels = vec![0.0; f.anchors];
        labels[f.labels[s]] = 1.0;
        expected += total_loss(&preds, &f.logits[s * f.anchors..(s + 1) * f.anchors], &gt, &labels, &cfg)
            .unwrap()
            .total;
    }
    expected /= f.samples as f64;
    let (got, _, _) = graph_loss(&f, &f.preds, &f.logits, &cfg);
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
}

#[test]
fn graph_loss_gradients_match_finite_differences() {
    let f = fixture();
    let cfg = LossConfig { lambda: 0.7, gamma: 1.3 };
    let (_, gx, gl) = graph_loss(&f, &f.preds, &f.logits, &cfg);
    let nx = central_difference(|p| graph_loss(&f, p, &f.logits, &cfg).0, &f.preds, 1e-5);
    let nl = central_difference(|l| graph_loss(&f, &f.preds, l, &cfg).0, &f.logits, 1e-5);
    assert!(max_relative_error(&gx, &nx, 1e-6) < 1e-4);
    assert!(max_relative_error(&gl, &nl, 1e-6) < 1e-4);
}

#[test]
fn negative_anchors_receive_no_trajectory_gradient() {
    let f = fixture();
    let (_, gx, _) = graph_loss(&f, &f.preds, &f.logits, &LossConfig { lambda: 0.0, gamma: 0.5 });
    let per_anchor = 4 * f.layout.seg_points() * 3;
    for (a, chunk) in gx.chunks(per_anchor).enumerate() {
        let (s, k) = (a / f.anchors, a % f.anchors);
        if k == f.labels[s] {
            assert!(chunk.iter().any(|&v| v != 0.0));
        } else {
            assert!(chunk.iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn loss_is_equivariant_under_anchor_permutation() {
    let f = fixture();
    let cfg = LossConfig::default();
    let (base, _, _) = graph_loss(&f, &f.preds, &f.logits, &cfg);
    let perm = [2usize, 0, 3, 1];
    let per_anchor = 4 * f.layout.seg_points() * 3;
    let mut preds = Vec::new();
    let mut logits = Vec::new();
    for s in 0..f.samples {
        for &p in &perm {
            let a = s * f.anchors + p;
            preds.extend_from_slice(&f.preds[a * per_anchor..(a + 1) * per_anchor]);
            logits.push(f.logits[a]);
        }
    }
    let relabeled = Fixture {
        labels: f.labels.iter().map(|&k| perm.iter().position(|&p| p == k).unwrap()).collect(),
        preds: preds.clone(),
        logits: logits.clone(),
        ..fixture()
    };
    let (moved, _, _) = graph_loss(&relabeled, &preds, &logits, &cfg);
    assert!((base - moved).abs() < 1e-12);
}

fn micro_setup(count: usize) -> (Denoiser, ParamStore, Vec<Example>, Vec<SegmentedTrajectory>) {
    let cfg = ModelConfig::micro();
    let layout = cfg.segmentation();
    let (model, store) = Denoiser::init(cfg, 3).unwrap();
    let mut rng = stream(6, Purpose::Test, 0);
    let anchors: Vec<Trajectory> = (0..cfg.anchors).map(|_| random_traj(&mut rng, cfg.horizon)).collect();
    let vocab = AnchorVocabulary {
        anchors: anchors.clone(),
        feature: ClusterFeature::PoseWithHeading,
    };
    let examples = (0..count)
        .map(|i| {
            let mut context = SceneContext::empty(&cfg.caps);
            context.ego_state = [i as f64 * 0.3; 10];
            context.agent_mask[0] = true;
            context.agents[0] = vec![[0.1 * i as f64; 9]; cfg.caps.history];
            let gt = anchors[i % anchors.len()].clone();
            Example {
                gt_tokens: tokenize(&gt, layout.segments, layout.groups).unwrap(),
                label: vocab.assign_label(&gt).unwrap(),
                gt,
                context,
            }
        })
        .collect();
    let tokens = tokenize_anchors(&vocab, layout).unwrap();
    (model, store, examples, tokens)
}

fn quick_config() -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        max_steps: 12,
        lr: 1e-2,
        seed: 9,
        ..TrainConfig::default()
    }
}

#[test]
fn identical_seeds_give_identical_runs() {
    let (model, store, examples, anchors) = micro_setup(4);
    let s = NoiseSchedule::default();
    let mut a = store.clone();
    let mut b = store.clone();
    let mut log_a = Vec::new();
    let ra = train(&model, &mut a, &s, &examples, &anchors, &quick_config(), TrainHooks { log: Some(&mut log_a), ..Default::default() }).unwrap();
    let rb = train(&model, &mut b, &s, &examples, &anchors, &quick_config(), TrainHooks::default()).unwrap();
    assert_eq!(ra.history, rb.history);
    assert_eq!(a, b);
    assert_ne!(a, store);
    let text = String::from_utf8(log_a).unwrap();
    assert_eq!(text.lines().count(), 12);
    assert!(text.starts_with("step=1 epoch=0 loss="));
}

#[test]
fn without_classification_weight_the_confidence_head_is_untouched() {
    let (model, store, examples, anchors) = micro_setup(4);
    let s = NoiseSchedule::default();
    let mut p = store.clone();
    let cfg = TrainConfig {
        max_steps: 60,
        loss: LossConfig { lambda: 0.0, gamma: 0.5 },
        ..quick_config()
    };
    let report = train(&model, &mut p, &s, &examples, &anchors, &cfg, TrainHooks::default()).unwrap();
    for (id, name, t) in store.iter() {
        if name.starts_with("confidence.") {
            assert_eq!(p.get(id), t, "{name}");
        }
    }
    let head: f64 = report.history[..10].iter().map(|m| m.rec).sum();
    let tail: f64 = report.history[50..].iter().map(|m| m.rec).sum();
    assert!(tail < head, "{head} -> {tail}");
    assert!(report.history.iter().all(|m| m.bce == 0.0));
}

#[test]
fn evaluator_keeps_best_parameters_and_stops_early() {
    let (model, store, examples, anchors) = micro_setup(4);
    let s = NoiseSchedule::default();
    let mut p = store.clone();
    let mut calls = 0;
    let mut snapshots = Vec::new();
    let mut eval = |params: &ParamStore| {
        calls += 1;
        snapshots.push(params.clone());
        // Best at the second evaluation, worse afterwards.
        Ok([3.0, 1.0, 2.0, 2.5, 2.6][calls - 1])
    };
    let cfg = TrainConfig {
        max_steps: 100,
        eval_every: 2,
        patience: 3,
        ..quick_config()
    };
    let report = train(&model, &mut p, &s, &examples, &anchors, &cfg, TrainHooks { evaluate: Some(&mut eval), ..Default::default() }).unwrap();
    assert_eq!(report.evals.len(), 5);
    assert_eq!(report.steps, 10);
    assert_eq!(report.best_step, Some(4));
    assert_eq!(p, snapshots[1]);
}

#[test]
fn periodic_checkpoints_are_written() {
    let (model, store, examples, anchors) = micro_setup(4);
    let dir = tempfile::tempdir().unwrap();
    let mut p = store.clone();
    let cfg = TrainConfig { max_steps: 6, checkpoint_every: 3, ..quick_config() };
    train(&model, &mut p, &NoiseSchedule::default(), &examples, &anchors, &cfg, TrainHooks { checkpoint_dir: Some(dir.path()), ..Default::default() }).unwrap();
    let (loaded, meta) = checkpoint::load(&dir.path().join("step-000006.ckpt")).unwrap();
    assert_eq!(loaded, p);
    assert!(meta.iter().any(|(k, v)| k == "step" && v == "6"));
    assert!(dir.path().join("step-000003.ckpt").exists());
}

#[test]
fn non_finite_loss_aborts_with_the_batch_seed() {
    let (model, mut store, examples, anchors) = micro_setup(4);
    let id = store.find("head0.1.b").unwrap();
    store.get_mut(id).data_mut()[0] = f64::NAN;
    let err = train(&model, &mut store, &NoiseSchedule::default(), &examples, &anchors, &quick_config(), TrainHooks::default()).unwrap_err();
    match err {
        Error::Diverged { step, batch_seed, message } => {
            assert_eq!(step, 1);
            assert_eq!(batch_seed, derive_seed(9, Purpose::TrainNoise, 1));
            assert!(message.contains("batch examples"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn learning_rate_warms_up_then_follows_a_cosine() {
    let cfg = TrainConfig {
        lr: 1e-3,
        max_steps: 109,
        warmup_steps: 9,
        cosine_decay: true,
        min_lr_ratio: 0.1,
        ..TrainConfig::default()
    };
    assert!((cfg.lr_at(1) - 1e-4).abs() < 1e-15);
    assert!((cfg.lr_at(9) - 9e-4).abs() < 1e-15);
    assert!(cfg.lr_at(10) < 1e-3 && cfg.lr_at(10) > 0.999e-3);
    let mid = 1e-4 + 0.5 * 9e-4;
    assert!((cfg.lr_at(9 + 50) - mid).abs() < 1e-12);
    assert!((cfg.lr_at(109) - 1e-4).abs() < 1e-15);
    assert!((cfg.lr_at(500) - 1e-4).abs() < 1e-15);
    let flat = TrainConfig { lr: 2e-3, ..TrainConfig::default() };
    assert_eq!(flat.lr_at(1), 2e-3);
    assert_eq!(flat.lr_at(1999), 2e-3);
    assert!(TrainConfig { noise_repeats: 0, ..TrainConfig::default() }.validate().is_err());
}

#[test]
fn repeated_noise_draws_change_the_batch_but_stay_deterministic() {
    let (model, store, examples, anchors) = micro_setup(4);
    let s = NoiseSchedule::default();
    let run = |repeats: usize| {
        let mut p = store.clone();
        let cfg = TrainConfig { noise_repeats: repeats, ..quick_config() };
        let r = train(&model, &mut p, &s, &examples, &anchors, &cfg, TrainHooks::default()).unwrap();
        (r.history, p)
    };
    let (h3, p3) = run(3);
    assert_eq!((h3.clone(), p3.clone()), run(3));
    let (h1, _) = run(1);
    assert_ne!(h1, h3);
    assert!(h3.iter().all(|m| ((m.acc * 6.0).round() - m.acc * 6.0).abs() < 1e-9));
}
