use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tailspace::artifacts::{self, create_dir};
use tailspace::checkpoint::{load_model, save_model, AdapterCheckpoint};
use tailspace::config::ExperimentConfig;
use tailspace::core::adapter::InitStrategy;
use tailspace::core::model::LayerParams;
use tailspace::experiment::{compare, persist_run, run_cell, run_experiment, RunManifest, SeedContext};
use tailspace::{LabError, Result};

#[derive(Parser)]
#[command(name = "tailspace", version, about = "Tail-eigenvector adapter experiments on toy models")]
struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config's `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Grid seed. Single-run verbs default to the first configured seed;
    /// `experiment` runs only this seed when given.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dump each target layer's output-activation covariance.
    Calibrate,
    /// Initialize adapters and write the adapted model.
    Init(RunArgs),
    /// Initialize, train and analyze one grid cell.
    Train(RunArgs),
    /// Effective-rank report for a model checkpoint (or the pretrained model).
    Analyze {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the full strategy × rank × seed grid.
    Experiment {
        /// Run seeds concurrently.
        #[arg(long)]
        parallel: bool,
    },
    /// Tabulate a finished experiment directory.
    Compare,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Defaults to the first configured strategy.
    #[arg(long)]
    strategy: Option<InitStrategy>,
    /// Defaults to the first configured rank.
    #[arg(long)]
    rank: Option<usize>,
}

enum Outcome {
    Done,
    Partial,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().filter_level(cli.log_level).format_timestamp(None).init();
    match run(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Partial) => ExitCode::from(2),
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(1)
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli.config.as_deref().ok_or_else(|| LabError::Validation(vec!["--config is required".into()]))?;
    let mut config = ExperimentConfig::load(path)?;
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    Ok(config)
}

fn seed_of(cli: &Cli, config: &ExperimentConfig) -> u64 {
    cli.seed.or_else(|| config.seeds.first().copied()).unwrap_or(0)
}

fn cell(config: &ExperimentConfig, args: &RunArgs) -> Result<(InitStrategy, usize)> {
    let strategy = args.strategy.or_else(|| config.strategies.first().copied());
    let rank = args.rank.or_else(|| config.ranks.first().copied());
    match (strategy, rank) {
        (Some(s), Some(r)) => Ok((s, r)),
        _ => Err(LabError::Validation(vec!["no strategy or rank given or configured".into()])),
    }
}

fn run(cli: Cli) -> Result<Outcome> {
    if let Command::Compare = cli.command {
        let dir = match (&cli.out, &cli.config) {
            (Some(out), _) => out.clone(),
            (None, Some(_)) => load_config(&cli)?.output_dir,
            (None, None) => return Err(LabError::Validation(vec!["compare needs --out or --config".into()])),
        };
        return compare_dir(&dir);
    }
    let mut config = load_config(&cli)?;
    if let Some(s) = cli.seed {
        config.seeds = vec![s];
    }
    config.validate()?;
    let out = config.output_dir.clone();
    let seed = seed_of(&cli, &config);
    match &cli.command {
        Command::Calibrate => {
            create_dir(&out)?;
            let ctx = SeedContext::new(&config, seed)?;
            for path in artifacts::write_covariances(&out, &ctx.covariances(&config)?)? {
                println!("{}", path.display());
            }
        }
        Command::Init(args) => {
            let (strategy, rank) = cell(&config, args)?;
            create_dir(&out.join("adapters"))?;
            let ctx = SeedContext::new(&config, seed)?;
            let covs = if strategy.requires_covariance() { ctx.covariances(&config)? } else { Default::default() };
            artifacts::write_covariances(&out, &covs)?;
            let model = ctx.adapted_model(&config, strategy, rank, &covs)?;
            for layer in model.layers() {
                if let LayerParams::Adapted(a) = &layer.params {
                    for w in &a.warnings {
                        log::warn!("{}: {w}", layer.spec.name);
                    }
                    let path = out.join("adapters").join(format!("{}.adapter", layer.spec.name));
                    AdapterCheckpoint::from_layer(&layer.spec.name, a).save(&path)?;
                }
            }
            save_model(&out.join("model.ckpt"), &model)?;
            println!("{}", out.join("model.ckpt").display());
        }
        Command::Train(args) => {
            let (strategy, rank) = cell(&config, args)?;
            let ctx = SeedContext::new(&config, seed)?;
            let covs = if strategy.requires_covariance() { ctx.covariances(&config)? } else { Default::default() };
            let outcome = run_cell(&config, &ctx, &covs, strategy, rank)?;
            let record = persist_run(&out, strategy, rank, seed, &outcome)?;
            println!(
                "{strategy} r={rank} seed={seed}: final loss {:.6e}, delta effective rank {:+.4} ({})",
                outcome.log.final_loss,
                outcome.delta_effective_rank(),
                out.join(&record.dir).display()
            );
        }
        Command::Analyze { checkpoint } => {
            create_dir(&out)?;
            let ctx = SeedContext::new(&config, seed)?;
            let model = match checkpoint {
                Some(p) => load_model(p)?,
                None => ctx.model.clone(),
            };
            let report = ctx.report(&config, &model)?;
            let csv = artifacts::write_report(&out, "report", &report)?;
            print!("{}", artifacts::report_csv(&report));
            log::info!("wrote {}", csv.display());
        }
        Command::Experiment { parallel } => {
            config.parallel |= *parallel;
            let manifest = run_experiment(&config, &out)?;
            let failed = manifest.failed();
            let outcome = compare_dir(&out)?;
            if failed > 0 {
                log::warn!("{failed} of {} runs failed", manifest.runs.len());
                return Ok(Outcome::Partial);
            }
            return Ok(outcome);
        }
        Command::Compare => unreachable!("handled above"),
    }
    Ok(Outcome::Done)
}

fn compare_dir(dir: &Path) -> Result<Outcome> {
    let manifest = RunManifest::load(dir)?;
    let table = compare(&manifest, dir);
    let csv = table.to_csv();
    artifacts::write_text(&dir.join("comparison.csv"), &csv)?;
    print!("{csv}");
    Ok(if table.has_gaps() { Outcome::Partial } else { Outcome::Done })
}
