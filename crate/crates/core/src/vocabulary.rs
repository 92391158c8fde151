//! Trajectory anchors from k-means, temporal segmentation into overlapping
//! tokens grouped into macro-groups, and positive-anchor labels.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::{stream, Purpose};

pub type Waypoint = [f64; 3];

/// Wraps an angle into `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Future ego poses `(x, y, φ)` at a fixed rate. Index 0 is the current
/// pose, so a horizon of `T_h` steps holds `T_h + 1` points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub points: Vec<Waypoint>,
}

impl Trajectory {
    pub fn new(points: Vec<Waypoint>) -> Result<Self> {
        if points.len() < 3 {
            return Err(Error::Dimension(format!(
                "trajectory needs a horizon of at least 2 steps, got {} points",
                points.len()
            )));
        }
        Ok(Self { points })
    }

    pub fn horizon(&self) -> usize {
        self.points.len() - 1
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }

    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if !values.len().is_multiple_of(3) {
            return Err(Error::Dimension("flat trajectory length not a multiple of 3".into()));
        }
        Self::new(values.chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn wrapped(mut self) -> Self {
        for p in &mut self.points {
            p[2] = wrap_angle(p[2]);
        }
        self
    }
}

/// How a horizon is cut into `n` segments and `g` macro-groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segmentation {
    pub horizon: usize,
    pub segments: usize,
    pub groups: usize,
}

impl Segmentation {
    pub fn new(horizon: usize, segments: usize, groups: usize) -> Result<Self> {
        if segments == 0 || !horizon.is_multiple_of(segments) {
            return Err(Error::Config(format!(
                "{segments} segments do not divide a horizon of {horizon}"
            )));
        }
        if groups == 0 || !segments.is_multiple_of(groups) {
            return Err(Error::Config(format!(
                "{groups} groups do not divide {segments} segments"
            )));
        }
        Ok(Self {
            horizon,
            segments,
            groups,
        })
    }

    /// Steps per segment `L`.
    pub fn seg_len(&self) -> usize {
        self.horizon / self.segments
    }

    /// Points per segment, `L + 1`.
    pub fn seg_points(&self) -> usize {
        self.seg_len() + 1
    }

    pub fn segs_per_group(&self) -> usize {
        self.segments / self.groups
    }

    /// Zero-based group of zero-based segment `n`.
    pub fn group_of(&self, n: usize) -> usize {
        n / self.segs_per_group()
    }

    pub fn group_segments(&self, g: usize) -> std::ops::Range<usize> {
        let s = self.segs_per_group();
        g * s..(g + 1) * s
    }

    /// First point index of segment `n`.
    pub fn seg_start(&self, n: usize) -> usize {
        n * self.seg_len()
    }
}

/// Overlapping segments: segment `n` covers points `[nL, (n+1)L]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentedTrajectory {
    pub layout: Segmentation,
    pub segments: Vec<Vec<Waypoint>>,
}

impl SegmentedTrajectory {
    /// Values of segment `n` flattened as `(x, y, φ)` rows.
    pub fn segment_flat(&self, n: usize) -> Vec<f64> {
        self.segments[n].iter().flatten().copied().collect()
    }

    /// All segments flattened in order, `N·(L+1)·3` values.
    pub fn flatten(&self) -> Vec<f64> {
        self.segments.iter().flatten().flatten().copied().collect()
    }

    pub fn from_flat(layout: Segmentation, values: &[f64]) -> Result<Self> {
        let per = layout.seg_points() * 3;
        if values.len() != per * layout.segments {
            return Err(Error::Dimension(format!(
                "expected {} segment values, got {}",
                per * layout.segments,
                values.len()
            )));
        }
        let segments = values
            .chunks(per)
            .map(|s| s.chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
            .collect();
        Ok(Self { layout, segments })
    }

    /// Largest Euclidean `(x, y)` gap between the end of one group and the
    /// start of the next.
    pub fn max_group_gap(&self) -> f64 {
        (0..self.layout.groups.saturating_sub(1))
            .map(|g| {
                let last = self.layout.group_segments(g).end - 1;
                let a = self.segments[last].last().unwrap();
                let b = self.segments[last + 1][0];
                (a[0] - b[0]).hypot(a[1] - b[1])
            })
            .fold(0.0, f64::max)
    }
}

pub fn tokenize(traj: &Trajectory, segments: usize, groups: usize) -> Result<SegmentedTrajectory> {
    let layout = Segmentation::new(traj.horizon(), segments, groups)?;
    let l = layout.seg_len();
    let segs = (0..segments)
        .map(|n| traj.points[n * l..=(n + 1) * l].to_vec())
        .collect();
    Ok(SegmentedTrajectory {
        layout,
        segments: segs,
    })
}

/// Inverse of [`tokenize`]; shared boundary points are averaged.
pub fn stitch(seg: &SegmentedTrajectory) -> Trajectory {
    let lay = seg.layout;
    let l = lay.seg_len();
    let mut points = Vec::with_capacity(lay.horizon + 1);
    for (n, s) in seg.segments.iter().enumerate() {
        if n == 0 {
            points.push(s[0]);
        } else {
            let prev = points.last_mut().unwrap();
            for c in 0..3 {
                prev[c] = 0.5 * (prev[c] + s[0][c]);
            }
        }
        points.extend_from_slice(&s[1..=l]);
    }
    Trajectory { points }
}

/// Positive anchor index `k*` and its one-hot vector.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelAssignment {
    pub index: usize,
    pub one_hot: Vec<f64>,
}

/// Feature vector used for clustering and labelling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClusterFeature {
    #[default]
    PoseWithHeading,
    PositionsOnly,
}

impl ClusterFeature {
    fn dist2(self, a: &[f64], b: &[f64]) -> f64 {
        let skip_heading = self == Self::PositionsOnly;
        let mut acc = 0.0;
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            if !skip_heading || i % 3 != 2 {
                acc += (x - y) * (x - y);
            }
        }
        acc
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorVocabulary {
    pub anchors: Vec<Trajectory>,
    #[serde(default)]
    pub feature: ClusterFeature,
}

impl AnchorVocabulary {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.anchors[0].horizon()
    }

    /// Nearest anchor, lowest index on ties.
    pub fn assign_label(&self, gt: &Trajectory) -> Result<LabelAssignment> {
        let g = gt.flatten();
        let mut best = (0, f64::INFINITY);
        for (k, a) in self.anchors.iter().enumerate() {
            let a = a.flatten();
            if a.len() != g.len() {
                return Err(Error::Dimension(format!(
                    "anchor has {} values, trajectory {}",
                    a.len(),
                    g.len()
                )));
            }
            let d = self.feature.dist2(&a, &g);
            if d < best.1 {
                best = (k, d);
            }
        }
        let mut one_hot = vec![0.0; self.anchors.len()];
        one_hot[best.0] = 1.0;
        Ok(LabelAssignment {
            index: best.0,
            one_hot,
        })
    }

    pub fn to_text(&self) -> String {
        let feature = match self.feature {
            ClusterFeature::PoseWithHeading => "pose",
            ClusterFeature::PositionsOnly => "positions",
        };
        let mut s = format!("anchors {} {} {feature}\n", self.len(), self.horizon());
        for a in &self.anchors {
            for p in &a.points {
                let _ = writeln!(s, "{} {} {}", p[0], p[1], p[2]);
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let bad = |i: usize, m: &str| Error::Parse {
            index: i,
            message: m.to_string(),
        };
        let (_, header) = lines.next().ok_or_else(|| bad(0, "empty anchor file"))?;
        let h: Vec<&str> = header.split_whitespace().collect();
        if !(3..=4).contains(&h.len()) || h[0] != "anchors" {
            return Err(bad(0, "expected header `anchors M T_h [pose|positions]`"));
        }
        let feature = match h.get(3) {
            None | Some(&"pose") => ClusterFeature::PoseWithHeading,
            Some(&"positions") => ClusterFeature::PositionsOnly,
            Some(_) => return Err(bad(0, "unknown clustering feature")),
        };
        let m: usize = h[1].parse().map_err(|_| bad(0, "anchor count"))?;
        let th: usize = h[2].parse().map_err(|_| bad(0, "horizon"))?;
        let mut anchors = Vec::with_capacity(m);
        for _ in 0..m {
            let mut pts = Vec::with_capacity(th + 1);
            for _ in 0..=th {
                let (i, line) = lines.next().ok_or_else(|| bad(0, "anchor file truncated"))?;
                let v: Vec<f64> = line
                    .split_whitespace()
                    .map(str::parse)
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad(i, "malformed waypoint"))?;
                if v.len() != 3 {
                    return Err(bad(i, "waypoint needs three values"));
                }
                pts.push([v[0], v[1], v[2]]);
            }
            anchors.push(Trajectory::new(pts)?);
        }
        if anchors.is_empty() {
            return Err(bad(0, "no anchors"));
        }
        Ok(Self { anchors, feature })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub clusters: usize,
    pub max_iters: usize,
    pub seed: u64,
    pub feature: ClusterFeature,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            clusters: 20,
            max_iters: 100,
            seed: 0,
            feature: ClusterFeature::PoseWithHeading,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansReport {
    /// Objective after each assignment pass.
    pub objective: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub reseeds: usize,
}

fn nearest(feature: ClusterFeature, x: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.iter().enumerate() {
        let d = feature.dist2(x, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn kmeans_pp(data: &[Vec<f64>], cfg: &KMeansConfig, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut centers = vec![data[rng.random_range(0..data.len())].clone()];
    let mut d2: Vec<f64> = data.iter().map(|x| cfg.feature.dist2(x, &centers[0])).collect();
    while centers.len() < cfg.clusters {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = data.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        } else {
            rng.random_range(0..data.len())
        };
        let c = data[pick].clone();
        for (di, x) in d2.iter_mut().zip(data) {
            *di = di.min(cfg.feature.dist2(x, &c));
        }
        centers.push(c);
    }
    centers
}

/// Lloyd iterations from k-means++ seeds until assignments stop changing.
/// An empty cluster is reseeded with the point farthest from its centroid.
pub fn build_vocabulary(corpus: &[Trajectory], cfg: &KMeansConfig) -> Result<(AnchorVocabulary, KMeansReport)> {
    if cfg.clusters == 0 || corpus.len() < cfg.clusters {
        return Err(Error::Config(format!(
            "{} trajectories cannot form {} clusters",
            corpus.len(),
            cfg.clusters
        )));
    }
    let data: Vec<Vec<f64>> = corpus.iter().map(Trajectory::flatten).collect();
    let dim = data[0].len();
    if data.iter().any(|x| x.len() != dim) {
        return Err(Error::Dimension("corpus trajectories differ in horizon".into()));
    }
    let mut rng = stream(cfg.seed, Purpose::KMeans, 0);
    let mut centers = kmeans_pp(&data, cfg, &mut rng);
    let mut assign: Vec<usize> = vec![usize::MAX; data.len()];
    let mut report = KMeansReport {
        objective: Vec::new(),
        iterations: 0,
        converged: false,
        reseeds: 0,
    };
    for _ in 0..cfg.max_iters {
        report.iterations += 1;
        let mut changed = false;
        let mut obj = 0.0;
        let mut dists = vec![0.0; data.len()];
        for (i, x) in data.iter().enumerate() {
            let (k, d) = nearest(cfg.feature, x, &centers);
            if assign[i] != k {
                assign[i] = k;
                changed = true;
            }
            dists[i] = d;
            obj += d;
        }
        report.objective.push(obj);
        if !changed {
            report.converged = true;
            break;
        }
        let mut sums = vec![vec![0.0; dim]; cfg.clusters];
        let mut counts = vec![0usize; cfg.clusters];
        for (x, &k) in data.iter().zip(&assign) {
            counts[k] += 1;
            for (s, v) in sums[k].iter_mut().zip(x) {
                *s += v;
            }
        }
        for k in 0..cfg.clusters {
            if counts[k] > 0 {
                centers[k] = sums[k].iter().map(|s| s / counts[k] as f64).collect();
            }
        }
        for k in 0..cfg.clusters {
            if counts[k] == 0 {
                let far = (0..data.len())
                    .filter(|&i| counts[assign[i]] > 1)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
                if let Some(i) = far {
                    counts[assign[i]] -= 1;
                    assign[i] = k;
                    counts[k] = 1;
                    dists[i] = 0.0;
                    centers[k] = data[i].clone();
                    report.reseeds += 1;
                }
            }
        }
    }
    let anchors = centers
        .iter()
        .map(|c| Trajectory::from_flat(c).map(Trajectory::wrapped))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        AnchorVocabulary {
            anchors,
            feature: cfg.feature,
        },
        report,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::normal;
    use proptest::prelude::*;

    fn line(th: usize, f: impl FnMut(usize) -> Waypoint) -> Trajectory {
        Trajectory::new((0..=th).map(f).collect()).unwrap()
    }

    #[test]
    fn wrap_angle_range() {
        use std::f64::consts::PI;
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert_eq!(wrap_angle(0.25), 0.25);
    }

    #[test]
    fn tokenize_examples() {
        let t = line(80, |i| [i as f64, 0.5 * i as f64, 0.01 * i as f64]);
        let s = tokenize(&t, 4, 2).unwrap();
        assert_eq!(s.segments.len(), 4);
        assert!(s.segments.iter().all(|x| x.len() == 21));
        let groups: Vec<usize> = (0..4).map(|n| s.layout.group_of(n)).collect();
        assert_eq!(groups, vec![0, 0, 1, 1]);
        for n in 0..3 {
            assert_eq!(s.segments[n].last(), s.segments[n + 1].first());
        }
        let one = tokenize(&t, 1, 1).unwrap();
        assert_eq!(one.segments[0], t.points);
        assert!(matches!(tokenize(&t, 3, 1), Err(Error::Config(_))));
        assert!(matches!(tokenize(&t, 4, 3), Err(Error::Config(_))));
        assert_eq!(s.max_group_gap(), 0.0);
    }

    #[test]
    fn stitch_averages_boundaries() {
        let t = line(4, |_| [0.0; 3]);
        let mut s = tokenize(&t, 2, 2).unwrap();
        s.segments[0][2] = [0.0, 0.0, 0.0];
        s.segments[1][0] = [2.0, 0.0, 0.0];
        let st = stitch(&s);
        assert_eq!(st.points[2], [1.0, 0.0, 0.0]);
        assert_eq!(st.points.len(), 5);
    }

    #[test]
    fn labels_pick_nearest_with_low_index_ties() {
        let anchors: Vec<Trajectory> = (0..10).map(|k| line(4, |i| [k as f64 * i as f64, 0.0, 0.0])).collect();
        let v = AnchorVocabulary {
            anchors: anchors.clone(),
            feature: ClusterFeature::PoseWithHeading,
        };
        let l = v.assign_label(&anchors[7]).unwrap();
        assert_eq!(l.index, 7);
        assert_eq!(l.one_hot.iter().sum::<f64>(), 1.0);
        let mid = line(4, |i| [3.5 * i as f64, 0.0, 0.0]);
        assert_eq!(v.assign_label(&mid).unwrap().index, 3);
        let tie = AnchorVocabulary {
            anchors: vec![
                line(2, |_| [9.0, 0.0, 0.0]),
                line(2, |_| [9.0, 0.0, 0.0]),
                line(2, |_| [1.0, 0.0, 0.0]),
                line(2, |_| [9.0, 9.0, 0.0]),
                line(2, |_| [9.0, 0.0, 0.0]),
                line(2, |_| [-1.0, 0.0, 0.0]),
            ],
            feature: ClusterFeature::PoseWithHeading,
        };
        assert_eq!(tie.assign_label(&line(2, |_| [0.0; 3])).unwrap().index, 2);
    }

    #[test]
    fn labels_match_brute_force() {
        let mut rng = stream(3, Purpose::Test, 0);
        let anchors: Vec<Trajectory> = (0..20)
            .map(|_| line(8, |_| [normal(&mut rng), normal(&mut rng), normal(&mut rng)]))
            .collect();
        let v = AnchorVocabulary {
            anchors,
            feature: ClusterFeature::PoseWithHeading,
        };
        for _ in 0..50 {
            let gt = line(8, |_| [normal(&mut rng), normal(&mut rng), normal(&mut rng)]);
            let d: Vec<f64> = v
                .anchors
                .iter()
                .map(|a| a.points.iter().zip(&gt.points).map(|(p, q)| (0..3).map(|c| (p[c] - q[c]).powi(2)).sum::<f64>()).sum())
                .collect();
            let mut oracle = 0;
            for k in 1..d.len() {
                if d[k] < d[oracle] {
                    oracle = k;
                }
            }
            assert_eq!(v.assign_label(&gt).unwrap().index, oracle);
        }
    }

    #[test]
    fn kmeans_single_cluster() {
        let t = line(6, |i| [i as f64, 0.1, 0.2]);
        let corpus = vec![t.clone(); 5];
        let (v, rep) = build_vocabulary(&corpus, &KMeansConfig { clusters: 1, ..Default::default() }).unwrap();
        assert_eq!(v.anchors[0], t);
        assert!(rep.converged);
        assert!(build_vocabulary(&corpus, &KMeansConfig { clusters: 6, ..Default::default() }).is_err());
    }

    #[test]
    fn kmeans_recovers_separated_cluster_means() {
        let mut rng = stream(11, Purpose::Test, 1);
        let mut corpus = Vec::new();
        let mut labels = Vec::new();
        for i in 0..60 {
            let left = i % 2 == 1;
            let j = 0.05 * normal(&mut rng);
            corpus.push(line(10, |k| {
                let s = k as f64;
                if left {
                    [s + j, 0.3 * s * s, 0.1 * s]
                } else {
                    [2.0 * s, j, 0.0]
                }
            }));
            labels.push(left as usize);
        }
        let (v, rep) = build_vocabulary(&corpus, &KMeansConfig { clusters: 2, seed: 4, ..Default::default() }).unwrap();
        assert!(rep.converged);
        for c in 0..2 {
            let members: Vec<Vec<f64>> = corpus.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(t, _)| t.flatten()).collect();
            let mean: Vec<f64> = (0..members[0].len())
                .map(|d| members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64)
                .collect();
            let best = v
                .anchors
                .iter()
                .map(|a| a.flatten().iter().zip(&mean).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
                .fold(f64::INFINITY, f64::min);
            assert!(best < 1e-6, "centroid error {best}");
        }
        assert!(rep.objective.windows(2).all(|w| w[1] <= w[0] + 1e-9));
    }

    #[test]
    fn kmeans_handles_duplicates_without_empty_clusters() {
        let mut corpus = vec![line(4, |i| [i as f64, 0.0, 0.0]); 10];
        corpus.extend((0..5).map(|k| line(4, |i| [i as f64, k as f64 + 5.0, 0.0])));
        let (v, rep) = build_vocabulary(&corpus, &KMeansConfig { clusters: 6, seed: 1, ..Default::default() }).unwrap();
        assert_eq!(v.len(), 6);
        assert!(rep.objective.windows(2).all(|w| w[1] <= w[0] + 1e-9));
        for t in &corpus {
            let l = v.assign_label(t).unwrap();
            assert!(v.feature.dist2(&v.anchors[l.index].flatten(), &t.flatten()) < 1e-18);
        }
    }

    #[test]
    fn anchor_file_round_trip() {
        let mut rng = stream(2, Purpose::Test, 2);
        let v = AnchorVocabulary {
            anchors: (0..3).map(|_| line(4, |_| [normal(&mut rng), normal(&mut rng), 0.1])).collect(),
            feature: ClusterFeature::PoseWithHeading,
        };
        assert_eq!(AnchorVocabulary::from_text(&v.to_text()).unwrap(), v);
        let txt = v.to_text();
        let cut: String = txt.lines().take(5).map(|l| format!("{l}\n")).collect();
        assert!(matches!(AnchorVocabulary::from_text(&cut), Err(Error::Parse { .. })));
    }

    proptest! {
        #[test]
        fn tokenize_stitch_round_trip(
            vals in proptest::collection::vec(-50.0f64..50.0, 3 * 17),
            pick in 0usize..5,
        ) {
            let (n, g) = [(1, 1), (2, 1), (2, 2), (4, 2), (8, 4)][pick];
            let t = Trajectory::from_flat(&vals).unwrap();
            let s = tokenize(&t, n, g).unwrap();
            prop_assert_eq!(stitch(&s), t);
            prop_assert_eq!(SegmentedTrajectory::from_flat(s.layout, &s.flatten()).unwrap(), s);
        }

        #[test]
        fn stitched_length_is_horizon(
            noise in proptest::collection::vec(-1.0f64..1.0, 4 * 21 * 3),
        ) {
            let t = Trajectory::new(vec![[0.0; 3]; 81]).unwrap();
            let mut s = tokenize(&t, 4, 2).unwrap();
            for (v, e) in s.segments.iter_mut().flatten().flatten().zip(&noise) {
                *v += e;
            }
            prop_assert_eq!(stitch(&s).points.len(), 81);
        }
    }
}
