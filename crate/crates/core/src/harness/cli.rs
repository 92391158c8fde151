//! `tddm` command line. Every subcommand reads and writes one run
//! directory.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use super::{
    ablate, build_anchors, evaluate, generate, load_checkpoint, save_checkpoint, split, svg_bar_chart, train_with_anchors,
    AblationAxis, RunConfig, Trained,
};
use crate::error::Error;
use crate::scene::{load_corpus, save_corpus, NormalizationStats};
use crate::vocabulary::AnchorVocabulary;

pub const CONFIG_FILE: &str = "config.toml";
pub const SEED_FILE: &str = "seed.txt";
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const STATS_FILE: &str = "stats.json";
pub const ANCHORS_FILE: &str = "anchors.txt";
pub const KMEANS_FILE: &str = "kmeans.txt";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "metrics.log";
pub const EVAL_FILE: &str = "eval.txt";

#[derive(Debug, Parser)]
#[command(name = "tddm", version, about = "Temporally decoupled diffusion trajectory planner")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Directory holding every artifact of the run.
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,
    /// Run configuration; defaults to the one stored in the run directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Heldout,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic scenario corpus.
    GenData {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Normalization statistics and the k-means anchor vocabulary.
    BuildAnchors,
    /// Train the denoiser.
    Train,
    /// Plan one scenario with a trained checkpoint.
    Plan {
        #[arg(long, default_value_t = 0)]
        scenario: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        cfg_scale: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        weak_noise_t: Option<f64>,
        #[arg(long, value_enum, default_value_t = SplitArg::Heldout)]
        split: SplitArg,
    },
    /// Open- and closed-loop evaluation on the held-out scenarios.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and score one ablation table.
    Ablate {
        /// components, tokens or cfg-scale.
        #[arg(long)]
        axis: String,
    },
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Runs the command line and returns the process exit code: 0 on success,
/// 1 when a pipeline stage fails, 2 on usage errors.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| Failure::Runtime(Error::io(path, e)))
}

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| Failure::Runtime(Error::io(path, e)))
}

/// Resolved config: `--config` if given, else the run directory's copy.
/// The resolved document and root seed are written back to the run
/// directory.
fn resolve_config(common: &Common, fallback_default: bool) -> CliResult<RunConfig> {
    let stored = common.run_dir.join(CONFIG_FILE);
    let cfg = match &common.config {
        Some(p) if !p.exists() => return Err(Failure::Usage(format!("config file {} not found", p.display()))),
        Some(p) => RunConfig::load(p).map_err(|e| Failure::Usage(e.to_string()))?,
        None if stored.exists() => RunConfig::load(&stored)?,
        None if fallback_default => RunConfig::default(),
        None => {
            return Err(Failure::Usage(format!(
                "no --config given and {} does not exist",
                stored.display()
            )))
        }
    };
    Ok(cfg)
}

fn record_config(run_dir: &Path, cfg: &RunConfig) -> CliResult<()> {
    fs::create_dir_all(run_dir).map_err(|e| Failure::Runtime(Error::io(run_dir, e)))?;
    write(&run_dir.join(CONFIG_FILE), &cfg.to_toml())?;
    write(&run_dir.join(SEED_FILE), &format!("{}\n", cfg.seed))
}

fn load_anchors(run_dir: &Path) -> CliResult<(NormalizationStats, AnchorVocabulary)> {
    let stats: NormalizationStats = serde_json::from_str(&read(&run_dir.join(STATS_FILE))?)
        .map_err(|e| Failure::Runtime(Error::Stats(e.to_string())))?;
    let vocab = AnchorVocabulary::load(&run_dir.join(ANCHORS_FILE))?;
    Ok((stats, vocab))
}

fn load_trained(run_dir: &Path, cfg: &RunConfig, checkpoint: Option<&PathBuf>) -> CliResult<Trained> {
    let path = checkpoint.cloned().unwrap_or_else(|| run_dir.join(CHECKPOINT_FILE));
    if !path.exists() {
        return Err(Failure::Usage(format!(
            "checkpoint {} not found; run `tddm train` first or pass --checkpoint",
            path.display()
        )));
    }
    let params = load_checkpoint(&path, &cfg.model)?;
    let (stats, vocab) = load_anchors(run_dir)?;
    Ok(Trained::new(cfg, params, stats, vocab)?)
}

fn dispatch(cli: Cli) -> CliResult<()> {
    let common = &cli.common;
    let dir = &common.run_dir;
    match cli.command {
        Command::GenData { count, seed } => {
            let mut cfg = resolve_config(common, true)?;
            if let Some(c) = count {
                cfg.data.count = c;
                cfg.data.heldout = cfg.data.heldout.min(c.saturating_sub(1));
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            record_config(dir, &cfg)?;
            let records = generate(&cfg)?;
            save_corpus(&records, &dir.join(CORPUS_FILE))?;
            println!("wrote {} scenarios to {}", records.len(), dir.join(CORPUS_FILE).display());
        }
        Command::BuildAnchors => {
            let cfg = resolve_config(common, false)?;
            record_config(dir, &cfg)?;
            let records = load_corpus(&dir.join(CORPUS_FILE))?;
            let (train_records, _) = split(&records, cfg.data.heldout);
            let (stats, vocab, report) = build_anchors(&cfg, train_records)?;
            let stats_json = serde_json::to_string_pretty(&stats).expect("stats serialize");
            write(&dir.join(STATS_FILE), &(stats_json + "\n"))?;
            vocab.save(&dir.join(ANCHORS_FILE))?;
            let mut text = format!(
                "iterations={}\nconverged={}\nreseeds={}\n",
                report.iterations, report.converged, report.reseeds
            );
            for (i, o) in report.objective.iter().enumerate() {
                text.push_str(&format!("objective[{i}]={o:.9}\n"));
            }
            write(&dir.join(KMEANS_FILE), &text)?;
            println!("built {} anchors in {} iterations", vocab.len(), report.iterations);
        }
        Command::Train => {
            let cfg = resolve_config(common, false)?;
            record_config(dir, &cfg)?;
            let records = load_corpus(&dir.join(CORPUS_FILE))?;
            let (train_records, eval_records) = split(&records, cfg.data.heldout);
            let (stats, vocab) = load_anchors(dir)?;
            let mut log = Vec::new();
            log.extend_from_slice(b"# resolved config\n");
            for line in cfg.to_toml().lines() {
                log.extend_from_slice(format!("# {line}\n").as_bytes());
            }
            let ckpt_dir = dir.join("checkpoints");
            let ckpt = if cfg.train.checkpoint_every > 0 {
                fs::create_dir_all(&ckpt_dir).map_err(|e| Failure::Runtime(Error::io(&ckpt_dir, e)))?;
                Some(ckpt_dir.as_path())
            } else {
                None
            };
            let result = train_with_anchors(&cfg, train_records, eval_records, stats, vocab, Some(&mut log), ckpt);
            write(&dir.join(TRAIN_LOG_FILE), &String::from_utf8_lossy(&log))?;
            let (trained, report) = result?;
            save_checkpoint(&dir.join(CHECKPOINT_FILE), &trained, report.steps)?;
            if let Some(last) = report.history.last() {
                println!("{}", last.log_line());
            }
            println!("trained {} steps; checkpoint {}", report.steps, dir.join(CHECKPOINT_FILE).display());
        }
        Command::Plan {
            scenario,
            checkpoint,
            cfg_scale,
            steps,
            weak_noise_t,
            split: which,
        } => {
            let cfg = resolve_config(common, false)?;
            let trained = load_trained(dir, &cfg, checkpoint.as_ref())?;
            let records = load_corpus(&dir.join(CORPUS_FILE))?;
            let (train_records, eval_records) = split(&records, cfg.data.heldout);
            let pool = if which == SplitArg::Train { train_records } else { eval_records };
            let record = pool.get(scenario).ok_or_else(|| {
                Failure::Usage(format!("scenario {scenario} out of range (0..{})", pool.len()))
            })?;
            let mut gcfg = cfg.guidance.clone();
            gcfg.cfg_scale = cfg_scale.unwrap_or(gcfg.cfg_scale);
            gcfg.steps = steps.unwrap_or(gcfg.steps);
            gcfg.weak_noise_t = weak_noise_t.unwrap_or(gcfg.weak_noise_t);
            gcfg.validate(cfg.model.groups).map_err(|e| Failure::Usage(e.to_string()))?;
            let plan = trained.plan(&record.context(&cfg.model.caps)?, &gcfg)?;
            let mut text = format!(
                "# scenario={scenario} tag={} selected={} score={:.9}\n# t_s x_m y_m heading_rad\n",
                record.tag, plan.selected, plan.score
            );
            for (i, p) in plan.trajectory.points.iter().enumerate() {
                text.push_str(&format!("{:.1} {:.6} {:.6} {:.6}\n", i as f64 * crate::scene::DT, p[0], p[1], p[2]));
            }
            write(&dir.join(format!("plan-{scenario}.txt")), &text)?;
            print!("{text}");
        }
        Command::Eval { checkpoint } => {
            let cfg = resolve_config(common, false)?;
            let trained = load_trained(dir, &cfg, checkpoint.as_ref())?;
            let records = load_corpus(&dir.join(CORPUS_FILE))?;
            let (_, eval_records) = split(&records, cfg.data.heldout);
            let report = evaluate(&trained, eval_records, &cfg, &cfg.guidance)?;
            let text = report.to_text();
            write(&dir.join(EVAL_FILE), &text)?;
            print!("{text}");
        }
        Command::Ablate { axis } => {
            let axis: AblationAxis = axis.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?;
            let cfg = resolve_config(common, false)?;
            record_config(dir, &cfg)?;
            let records = load_corpus(&dir.join(CORPUS_FILE))?;
            let table = ablate(&cfg, axis, &records)?;
            let csv = table.to_csv();
            write(&dir.join(format!("ablation-{}.csv", axis.name())), &csv)?;
            write(&dir.join(format!("ablation-{}.svg", axis.name())), &svg_bar_chart(&table))?;
            print!("{csv}");
        }
    }
    Ok(())
}
