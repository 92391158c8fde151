//! Run configuration, the data → anchors → training → evaluation pipeline,
//! metrics, the closed-loop simulator, ablations and the command line.

mod ablate;
pub mod cli;
mod closed_loop;
mod metrics;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use ablate::{ablate, svg_bar_chart, AblationAxis, AblationRow, AblationTable};
pub use closed_loop::{expert_replay, run_episode, ClosedLoopConfig, EpisodeResult, ReplanInput};
pub use metrics::{composite_score, evaluate, open_loop_metrics, plan_collides, EvalReport, OpenLoopMetrics, ScenarioMetrics};

use crate::error::{Error, Result};
use crate::guidance::{GuidanceConfig, PlanResult, Planner};
use crate::model::{Denoiser, ModelConfig};
use crate::numerics::rng::{derive_seed, Purpose};
use crate::numerics::{checkpoint, ParamStore};
use crate::scene::{generate_corpus, GeneratorConfig, NormalizationStats, ScenarioRecord, SceneContext};
use crate::schedule::NoiseSchedule;
use crate::training::{prepare_examples, tokenize_anchors, train, Example, TrainConfig, TrainHooks, TrainReport};
use crate::vocabulary::{build_vocabulary, AnchorVocabulary, ClusterFeature, KMeansConfig, KMeansReport, SegmentedTrajectory};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub count: usize,
    /// Trailing scenarios kept out of training; 0 evaluates on the
    /// training scenarios.
    pub heldout: usize,
    pub generator: GeneratorConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            count: 200,
            heldout: 20,
            generator: GeneratorConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorConfig {
    pub max_iters: usize,
    pub feature: ClusterFeature,
    /// Centre the lateral coordinate when normalizing.
    pub recenter_y: bool,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            feature: ClusterFeature::PoseWithHeading,
            recenter_y: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub closed_loop: bool,
    /// Evaluate at most this many scenarios; 0 keeps all.
    pub max_scenarios: usize,
    pub episode: ClosedLoopConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            closed_loop: true,
            max_scenarios: 0,
            episode: ClosedLoopConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    /// Training steps per cell; 0 keeps `train.max_steps`.
    pub train_steps: usize,
    /// Run cells on separate threads.
    pub parallel: bool,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            train_steps: 0,
            parallel: true,
        }
    }
}

/// Every setting of a run in one document.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed: corpus, anchors and initialization derive from it.
    pub seed: u64,
    pub data: DataConfig,
    pub schedule: NoiseSchedule,
    pub model: ModelConfig,
    pub anchors: AnchorConfig,
    pub train: TrainConfig,
    pub guidance: GuidanceConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        NoiseSchedule::new(self.schedule.beta_min, self.schedule.beta_max)?;
        self.model.validate()?;
        self.train.validate()?;
        self.guidance.validate(self.model.groups)?;
        if self.model.horizon != crate::scene::HORIZON_STEPS {
            return Err(Error::Config(format!(
                "model horizon {} differs from the logged horizon {}",
                self.model.horizon,
                crate::scene::HORIZON_STEPS
            )));
        }
        if self.data.count == 0 || self.data.heldout >= self.data.count {
            return Err(Error::Config(format!(
                "{} held-out scenarios leave no training data out of {}",
                self.data.heldout, self.data.count
            )));
        }
        Ok(())
    }

    pub fn kmeans(&self) -> KMeansConfig {
        KMeansConfig {
            clusters: self.model.anchors,
            max_iters: self.anchors.max_iters,
            seed: derive_seed(self.seed, Purpose::KMeans, 0),
            feature: self.anchors.feature,
        }
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, Purpose::Init, 0)
    }
}

pub fn generate(cfg: &RunConfig) -> Result<Vec<ScenarioRecord>> {
    generate_corpus(cfg.data.count, cfg.seed, &cfg.data.generator)
}

/// `(training, evaluation)` records. Without a held-out split both are the
/// full corpus.
pub fn split(records: &[ScenarioRecord], heldout: usize) -> (&[ScenarioRecord], &[ScenarioRecord]) {
    if heldout == 0 || heldout >= records.len() {
        (records, records)
    } else {
        records.split_at(records.len() - heldout)
    }
}

/// Normalization statistics and the anchor vocabulary of the training
/// split. Clustering runs on normalized trajectories.
pub fn build_anchors(cfg: &RunConfig, train_records: &[ScenarioRecord]) -> Result<(NormalizationStats, AnchorVocabulary, KMeansReport)> {
    let caps = &cfg.model.caps;
    let contexts = train_records.iter().map(|r| r.context(caps)).collect::<Result<Vec<_>>>()?;
    let futures: Vec<_> = train_records.iter().map(ScenarioRecord::future).collect();
    let stats = NormalizationStats::compute(&contexts, &futures, cfg.anchors.recenter_y)?;
    let normalized: Vec<_> = futures.iter().map(|f| stats.normalize_trajectory(f)).collect();
    let (vocab, report) = build_vocabulary(&normalized, &cfg.kmeans())?;
    Ok((stats, vocab, report))
}

/// A trained planner with everything needed to run it.
pub struct Trained {
    pub model: Denoiser,
    pub params: ParamStore,
    pub stats: NormalizationStats,
    pub vocab: AnchorVocabulary,
    pub anchors: Vec<SegmentedTrajectory>,
    pub schedule: NoiseSchedule,
}

impl Trained {
    pub fn new(cfg: &RunConfig, params: ParamStore, stats: NormalizationStats, vocab: AnchorVocabulary) -> Result<Self> {
        let (model, params) = Denoiser::bind(cfg.model, &params)?;
        if vocab.len() != cfg.model.anchors || vocab.horizon() != cfg.model.horizon {
            return Err(Error::Config(format!(
                "vocabulary of {} anchors over {} steps does not fit the model",
                vocab.len(),
                vocab.horizon()
            )));
        }
        let anchors = tokenize_anchors(&vocab, cfg.model.segmentation())?;
        Ok(Self {
            model,
            params,
            stats,
            vocab,
            anchors,
            schedule: cfg.schedule,
        })
    }

    pub fn planner(&self) -> Planner<'_> {
        Planner {
            model: &self.model,
            params: &self.params,
            schedule: &self.schedule,
            anchors: &self.anchors,
            stats: &self.stats,
        }
    }

    /// Plan from a raw (metric) context.
    pub fn plan(&self, ctx: &SceneContext, gcfg: &GuidanceConfig) -> Result<PlanResult> {
        self.planner().plan(&self.stats.normalize_context(ctx), gcfg)
    }
}

/// Mean open-loop ADE of the guided plan over normalized `examples`.
pub fn heldout_ade(planner: &Planner<'_>, examples: &[Example], gcfg: &GuidanceConfig) -> Result<f64> {
    let mut total = 0.0;
    for ex in examples {
        let plan = planner.plan(&ex.context, gcfg)?;
        let gt = planner.stats.denormalize_trajectory(&ex.gt);
        total += metrics::ade_fde(&plan.trajectory, &gt)?.0;
    }
    Ok(total / examples.len().max(1) as f64)
}

/// Trains a fresh model on `train_records`; held-out ADE on
/// `eval_records` drives early stopping when enabled.
pub fn train_pipeline(
    cfg: &RunConfig,
    train_records: &[ScenarioRecord],
    eval_records: &[ScenarioRecord],
    log: Option<&mut dyn std::io::Write>,
    checkpoint_dir: Option<&Path>,
) -> Result<(Trained, TrainReport)> {
    cfg.validate()?;
    let (stats, vocab, _) = build_anchors(cfg, train_records)?;
    train_with_anchors(cfg, train_records, eval_records, stats, vocab, log, checkpoint_dir)
}

pub fn train_with_anchors(
    cfg: &RunConfig,
    train_records: &[ScenarioRecord],
    eval_records: &[ScenarioRecord],
    stats: NormalizationStats,
    vocab: AnchorVocabulary,
    log: Option<&mut dyn std::io::Write>,
    checkpoint_dir: Option<&Path>,
) -> Result<(Trained, TrainReport)> {
    let layout = cfg.model.segmentation();
    let caps = &cfg.model.caps;
    let examples = prepare_examples(train_records, &stats, &vocab, caps, layout)?;
    let heldout = prepare_examples(eval_records, &stats, &vocab, caps, layout)?;
    let (_, params) = Denoiser::init(cfg.model, cfg.init_seed())?;
    let mut trained = Trained::new(cfg, params, stats, vocab)?;
    let mut params = trained.params.clone();
    let report = {
        let (model, stats, anchors) = (&trained.model, &trained.stats, &trained.anchors);
        let mut eval = |p: &ParamStore| {
            let planner = Planner {
                model,
                params: p,
                schedule: &cfg.schedule,
                anchors,
                stats,
            };
            heldout_ade(&planner, &heldout, &cfg.guidance)
        };
        let hooks = TrainHooks {
            log: log.map(|w| w as &mut dyn std::io::Write),
            evaluate: if cfg.train.eval_every > 0 { Some(&mut eval) } else { None },
            checkpoint_dir,
        };
        train(model, &mut params, &cfg.schedule, &examples, anchors, &cfg.train, hooks)?
    };
    trained.params = params;
    Ok((trained, report))
}

pub fn save_checkpoint(path: &Path, trained: &Trained, step: usize) -> Result<()> {
    checkpoint::save(path, &trained.params, &crate::training::checkpoint_meta(&trained.model, step))
}

/// Parameters of a checkpoint, checked against the model config stored
/// with it.
pub fn load_checkpoint(path: &Path, model: &ModelConfig) -> Result<ParamStore> {
    let (params, meta) = checkpoint::load(path)?;
    if let Some((_, stored)) = meta.iter().find(|(k, _)| k == "model") {
        let stored: ModelConfig = serde_json::from_str(stored).map_err(|e| Error::Checkpoint(format!("model metadata: {e}")))?;
        if &stored != model {
            return Err(Error::Checkpoint("checkpoint was trained with a different model config".into()));
        }
    }
    Ok(params)
}
