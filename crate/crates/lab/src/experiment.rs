//! The strategy × rank × seed grid and its comparison table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tailspace_core::adapter::InitStrategy;
use tailspace_core::analysis::{spectral_report, EffectiveRankReport};
use tailspace_core::calibration::{calibrate_model, CalibrationSet};
use tailspace_core::model::{LayerParams, ToyModel};
use tailspace_core::rng::derive_seed;
use tailspace_core::task::{generate, Task};
use tailspace_core::train::{run_training, MetricLog, TrainConfig};
use tailspace_core::Matrix;

use crate::artifacts::{self, create_dir, write_atomic, MetricSummary};
use crate::checkpoint::{save_model, AdapterCheckpoint};
use crate::config::ExperimentConfig;
use crate::error::{LabError, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_FILE: &str = "manifest.json";

/// Model, task and calibration inputs shared by every run of one seed.
#[derive(Debug, Clone)]
pub struct SeedContext {
    pub seed: u64,
    pub model: ToyModel,
    pub task: Task,
    pub calibration: CalibrationSet,
}

impl SeedContext {
    pub fn new(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        let model = config.model.build(seed)?;
        let task = generate(&config.task, &model, derive_seed(seed, "task"))?;
        let calibration = task.calibration_set(config.calibration.n_samples, config.calibration.source)?;
        Ok(Self { seed, model, task, calibration })
    }

    pub fn covariances(&self, config: &ExperimentConfig) -> Result<BTreeMap<String, Matrix>> {
        Ok(calibrate_model(&self.model, &self.calibration, &config.targets(), config.calibration.options())?)
    }

    pub fn report(&self, config: &ExperimentConfig, model: &ToyModel) -> Result<EffectiveRankReport> {
        Ok(spectral_report(model, &self.calibration, &config.targets(), config.calibration.options())?)
    }

    /// Copy of the pretrained model with adapters on every target layer.
    /// `covs` must hold each target's covariance when `strategy` needs one.
    pub fn adapted_model(
        &self,
        config: &ExperimentConfig,
        strategy: InitStrategy,
        rank: usize,
        covs: &BTreeMap<String, Matrix>,
    ) -> Result<ToyModel> {
        let mut model = self.model.clone();
        let alpha = config.alpha.alpha(rank);
        for name in config.targets() {
            let seed = derive_seed(self.seed, &format!("adapter/{name}"));
            let cov = covs.get(&name);
            model.inject_with(&name, |w| strategy.initialize(w, cov, rank, alpha, seed))?;
        }
        Ok(model)
    }

    pub fn train_config(&self, config: &ExperimentConfig) -> TrainConfig {
        TrainConfig { seed: derive_seed(self.seed, "shuffle") ^ config.train.seed, ..config.train.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Failed { error: String },
}

/// Paths are relative to the experiment output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub strategy: InitStrategy,
    pub rank: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub status: RunStatus,
    pub dir: PathBuf,
    pub metrics: Option<PathBuf>,
    pub summary: Option<PathBuf>,
    pub report_pre: Option<PathBuf>,
    pub report_post: Option<PathBuf>,
    pub adapters: Vec<PathBuf>,
    pub model: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub tool_version: String,
    pub runs: Vec<RunRecord>,
}

impl RunManifest {
    pub fn failed(&self) -> usize {
        self.runs.iter().filter(|r| r.status != RunStatus::Completed).count()
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        serde_json::from_str(&artifacts::read_text(&path)?)
            .map_err(|e| LabError::format(path.display().to_string(), e.to_string()))
    }
}

/// Everything one grid cell produced, in memory.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub log: MetricLog,
    pub pre: EffectiveRankReport,
    pub post: EffectiveRankReport,
    pub model: ToyModel,
}

impl RunOutcome {
    pub fn delta_effective_rank(&self) -> f64 {
        self.post.total() - self.pre.total()
    }
}

/// Initializes, trains and analyzes one cell without touching the disk.
pub fn run_cell(
    config: &ExperimentConfig,
    ctx: &SeedContext,
    covs: &BTreeMap<String, Matrix>,
    strategy: InitStrategy,
    rank: usize,
) -> Result<RunOutcome> {
    let pre = ctx.report(config, &ctx.model)?;
    let mut model = ctx.adapted_model(config, strategy, rank, covs)?;
    let log = run_training(&mut model, &ctx.task.train, &ctx.train_config(config))?;
    let post = ctx.report(config, &model)?;
    Ok(RunOutcome { log, pre, post, model })
}

pub fn run_dir_name(strategy: InitStrategy, rank: usize, seed: u64) -> String {
    format!("{}_r{rank}_s{seed}", strategy.to_string().replace(':', "-"))
}

/// Writes a cell's artifacts under `root/<run dir>` and returns its record.
pub fn persist_run(root: &Path, strategy: InitStrategy, rank: usize, seed: u64, outcome: &RunOutcome) -> Result<RunRecord> {
    let rel = PathBuf::from("runs").join(run_dir_name(strategy, rank, seed));
    let dir = root.join(&rel);
    create_dir(&dir.join("adapters"))?;
    artifacts::write_metric_log(&dir, &outcome.log)?;
    artifacts::write_report(&dir, "report_pre", &outcome.pre)?;
    artifacts::write_report(&dir, "report_post", &outcome.post)?;
    let mut adapters = Vec::new();
    for layer in outcome.model.layers() {
        if let LayerParams::Adapted(a) = &layer.params {
            let file = rel.join("adapters").join(format!("{}.adapter", layer.spec.name));
            AdapterCheckpoint::from_layer(&layer.spec.name, a).save(&root.join(&file))?;
            adapters.push(file);
        }
    }
    save_model(&dir.join("model.ckpt"), &outcome.model)?;
    Ok(RunRecord {
        strategy,
        rank,
        seed,
        status: RunStatus::Completed,
        metrics: Some(rel.join("metrics.csv")),
        summary: Some(rel.join("summary.json")),
        report_pre: Some(rel.join("report_pre.csv")),
        report_post: Some(rel.join("report_post.csv")),
        adapters,
        model: Some(rel.join("model.ckpt")),
        dir: rel,
    })
}

fn failed_record(strategy: InitStrategy, rank: usize, seed: u64, error: &LabError) -> RunRecord {
    RunRecord {
        strategy,
        rank,
        seed,
        status: RunStatus::Failed { error: error.to_string() },
        dir: PathBuf::from("runs").join(run_dir_name(strategy, rank, seed)),
        metrics: None,
        summary: None,
        report_pre: None,
        report_post: None,
        adapters: Vec::new(),
        model: None,
    }
}

/// Runs the whole grid into `out` and writes `manifest.json` last. Failed
/// cells are recorded and the grid continues.
pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> Result<RunManifest> {
    config.validate()?;
    create_dir(out)?;
    artifacts::write_text(&out.join("config.json"), &config.to_json())?;

    let cells: Vec<(u64, InitStrategy, usize)> = config
        .seeds
        .iter()
        .flat_map(|&seed| config.strategies.iter().flat_map(move |&s| config.ranks.iter().map(move |&r| (seed, s, r))))
        .collect();

    let run_seed = |seed: u64| -> Vec<RunRecord> {
        let mine: Vec<_> = cells.iter().filter(|c| c.0 == seed).collect();
        let prepared = SeedContext::new(config, seed).and_then(|ctx| {
            let needs_cov = config.strategies.iter().any(|s| s.requires_covariance());
            let covs = if needs_cov { ctx.covariances(config)? } else { BTreeMap::new() };
            Ok((ctx, covs))
        });
        let (ctx, covs) = match prepared {
            Ok(p) => p,
            Err(e) => {
                log::error!("seed {seed}: setup failed: {e}");
                return mine.iter().map(|&&(_, s, r)| failed_record(s, r, seed, &e)).collect();
            }
        };
        mine.iter()
            .map(|&&(_, strategy, rank)| {
                let result = run_cell(config, &ctx, &covs, strategy, rank)
                    .and_then(|o| persist_run(out, strategy, rank, seed, &o).map(|rec| (rec, o)));
                match result {
                    Ok((rec, o)) => {
                        log::info!(
                            "{strategy} r={rank} seed={seed}: final loss {:.6e}, delta effective rank {:+.4}",
                            o.log.final_loss,
                            o.delta_effective_rank()
                        );
                        rec
                    }
                    Err(e) => {
                        log::error!("{strategy} r={rank} seed={seed}: {e}");
                        failed_record(strategy, rank, seed, &e)
                    }
                }
            })
            .collect()
    };

    let per_seed: Vec<Vec<RunRecord>> = if config.parallel {
        config.seeds.par_iter().map(|&s| run_seed(s)).collect()
    } else {
        config.seeds.iter().map(|&s| run_seed(s)).collect()
    };
    let manifest = RunManifest {
        config_hash: config.hash(),
        tool_version: TOOL_VERSION.to_string(),
        runs: per_seed.into_iter().flatten().collect(),
    };
    write_atomic(&out.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub strategy: InitStrategy,
    pub rank: usize,
    /// Runs whose artifacts were read.
    pub runs: usize,
    /// Runs that failed or whose artifacts are missing.
    pub missing: usize,
    pub mean_final_loss: Option<f64>,
    pub mean_final_grad_norm: Option<f64>,
    pub mean_delta_effective_rank: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    /// Ascending mean final loss; rows without data last.
    pub rows: Vec<ComparisonRow>,
}

pub const COMPARISON_HEADER: &str =
    "strategy,rank,runs,missing,mean_final_loss,mean_final_grad_norm,delta_effective_rank";

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:?}"));
        let mut out = String::from(COMPARISON_HEADER);
        out.push('\n');
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.strategy,
                r.rank,
                r.runs,
                r.missing,
                cell(r.mean_final_loss),
                cell(r.mean_final_grad_norm),
                cell(r.mean_delta_effective_rank)
            )
            .expect("write to String");
        }
        out
    }

    pub fn has_gaps(&self) -> bool {
        self.rows.iter().any(|r| r.missing > 0)
    }
}

fn total_effective_rank(path: &Path) -> Result<f64> {
    Ok(artifacts::parse_report_csv(&artifacts::read_text(path)?)?.iter().map(|row| row.3).sum())
}

/// `(final loss, final grad norm, Δ effective rank)` from a run's files.
fn read_run(root: &Path, rec: &RunRecord) -> Result<(f64, f64, f64)> {
    let missing = || LabError::format(rec.dir.display().to_string(), "run has no artifacts");
    let (Some(summary), Some(pre), Some(post)) = (&rec.summary, &rec.report_pre, &rec.report_post) else {
        return Err(missing());
    };
    let s: MetricSummary = serde_json::from_str(&artifacts::read_text(&root.join(summary))?)?;
    let delta = total_effective_rank(&root.join(post))? - total_effective_rank(&root.join(pre))?;
    Ok((s.final_loss, s.final_grad_norm, delta))
}

/// Aggregates a manifest's runs per (strategy, rank) from the persisted
/// artifacts under `root`. Failed or unreadable runs count as missing.
pub fn compare(manifest: &RunManifest, root: &Path) -> ComparisonTable {
    // (strategy, rank), per-run (loss, grad norm, ΔER), missing count
    type Group = ((InitStrategy, usize), Vec<(f64, f64, f64)>, usize);
    let mut groups: Vec<Group> = Vec::new();
    for rec in &manifest.runs {
        let key = (rec.strategy, rec.rank);
        let idx = match groups.iter().position(|g| g.0 == key) {
            Some(i) => i,
            None => {
                groups.push((key, Vec::new(), 0));
                groups.len() - 1
            }
        };
        let read = match rec.status {
            RunStatus::Completed => read_run(root, rec),
            RunStatus::Failed { .. } => Err(LabError::format("run", "failed")),
        };
        match read {
            Ok(v) => groups[idx].1.push(v),
            Err(e) => {
                log::warn!("{}: {e}", rec.dir.display());
                groups[idx].2 += 1;
            }
        }
    }
    let mean = |xs: &[f64]| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    let mut rows: Vec<ComparisonRow> = groups
        .into_iter()
        .map(|((strategy, rank), vals, missing)| ComparisonRow {
            strategy,
            rank,
            runs: vals.len(),
            missing,
            mean_final_loss: mean(&vals.iter().map(|v| v.0).collect::<Vec<_>>()),
            mean_final_grad_norm: mean(&vals.iter().map(|v| v.1).collect::<Vec<_>>()),
            mean_delta_effective_rank: mean(&vals.iter().map(|v| v.2).collect::<Vec<_>>()),
        })
        .collect();
    // Stable sort: ties keep grid order.
    rows.sort_by(|a, b| match (a.mean_final_loss, b.mean_final_loss) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    ComparisonTable { rows }
}
