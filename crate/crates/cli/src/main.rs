use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use stsn::harness::{
    self, emit_report, Ablation, Checkpoint, MetricsLog, TrainConfig, TrainOptions, TrainOutcome, SEED_ENV,
};
use stsn::matrixgen::{generate_set, read_dataset, write_dataset, MatrixProblem, ProblemType};

#[derive(Parser)]
#[command(name = "stsn", version, about = "Slot transformer scoring network: train, evaluate and generate matrix problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON or key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config field, e.g. `--set lambda=1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let pairs = self
            .overrides
            .iter()
            .map(|kv| {
                kv.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))
            })
            .collect::<Result<Vec<_>>>()?;
        let env = std::env::var(SEED_ENV).ok();
        Ok(TrainConfig::resolve(self.config.as_deref(), env.as_deref(), &pairs)?)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Training dataset.
    #[arg(long)]
    train: PathBuf,
    /// Validation dataset used for checkpoint selection.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Test dataset evaluated with the selected checkpoint.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Validate every this many epochs.
    #[arg(long, default_value_t = 1)]
    eval_every: usize,
    /// Stop once training accuracy reaches this fraction.
    #[arg(long)]
    stop_at: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train with the configured regime.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Reconstruction-pretrained checkpoint for the perceptual branch.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Extra reconstruction-only dataset for the dual_train regime.
        #[arg(long)]
        extra: Option<PathBuf>,
        /// Train this many seeds and report the best and mean test accuracy.
        #[arg(long, default_value_t = 1)]
        replicas: usize,
    },
    /// Pretrain encoder, slot attention and decoder on reconstruction.
    PretrainRecon {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train with an extra reconstruction-only dataset.
    DualTrain {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        extra: PathBuf,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Refuse the checkpoint unless it matches this configuration.
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        check_config: bool,
    },
    /// Train the baseline and one ablated variant.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Component to remove. Exactly one per run.
        #[arg(long = "flag", required = true)]
        flags: Vec<String>,
    },
    /// Generate a dataset of matrix problems.
    Generate {
        /// logic, location, count or all.
        #[arg(long = "type", default_value = "all")]
        problem_type: String,
        /// Problems per type.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Index of the first problem; disjoint ranges give disjoint splits.
        #[arg(long, default_value_t = 0)]
        offset: u64,
        /// Panel edge in pixels.
        #[arg(long, default_value_t = 80)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the total loss on the micro model.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Write CSV curves, slot grids and a summary for a trained run.
    Report {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        metrics: PathBuf,
        /// Problems to render.
        #[arg(long)]
        samples: PathBuf,
        /// Render at most this many problems.
        #[arg(long, default_value_t = 4)]
        limit: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(path: &Path) -> Result<Vec<MatrixProblem>> {
    read_dataset(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn load_opt(path: Option<&Path>) -> Result<Vec<MatrixProblem>> {
    path.map_or(Ok(Vec::new()), load)
}

fn options(run: &RunArgs) -> TrainOptions {
    TrainOptions {
        eval_every: run.eval_every,
        stop_at_train_accuracy: run.stop_at,
        dump_dir: Some(run.out.clone()),
        ..TrainOptions::new()
    }
}

fn save_outcome(dir: &Path, out: &TrainOutcome, test: &[MatrixProblem]) -> Result<Option<f64>> {
    std::fs::create_dir_all(dir)?;
    out.best.save(&dir.join("best.ckpt"))?;
    out.last.save(&dir.join("last.ckpt"))?;
    let mut log = out.log.clone();
    let mut acc = None;
    if !test.is_empty() {
        let report = harness::evaluate(&out.best, None, test)?;
        for (t, &(c, n)) in &report.per_type {
            log.test_accuracy.insert(t.clone(), c as f64 / n as f64);
        }
        println!("test accuracy {:.4} on {} problems", report.accuracy(), report.total());
        acc = Some(report.accuracy());
    }
    log.save_json(&dir.join("metrics.json"))?;
    std::fs::write(dir.join("steps.csv"), log.steps_csv())?;
    std::fs::write(dir.join("epochs.csv"), log.epochs_csv())?;
    Ok(acc)
}

fn run_train(run: &RunArgs, init: Option<&Path>, extra: Option<&Path>, replicas: usize) -> Result<()> {
    let config = run.cfg.resolve()?;
    let train = load(&run.train)?;
    let val = load_opt(run.val.as_deref())?;
    let test = load_opt(run.test.as_deref())?;
    let extra = load_opt(extra)?;
    let mut opts = options(run);
    if let Some(p) = init {
        opts.init = Some(Checkpoint::load(p, Some(&config))?);
    }
    std::fs::create_dir_all(&run.out)?;
    let summary = harness::replicas(&config, replicas, |cfg| {
        let dir = if replicas == 1 { run.out.clone() } else { run.out.join(format!("seed{}", cfg.seed)) };
        let started = Instant::now();
        let out = harness::run_regime(cfg, &train, &val, &extra, &opts)?;
        info!("seed {} trained in {:.1}s", cfg.seed, started.elapsed().as_secs_f64());
        let acc = save_outcome(&dir, &out, &test).map_err(|e| stsn::Error::Config(e.to_string()))?;
        Ok(acc.or(out.log.best_val_accuracy()).unwrap_or(out.log.final_train_accuracy().unwrap_or(0.0)))
    })?;
    if replicas > 1 {
        println!("replicas {:?}: max {:.4} mean {:.4}", summary.seeds, summary.max, summary.mean);
        std::fs::write(run.out.join("replicas.json"), serde_json::to_vec_pretty(&summary)?)?;
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train { run, init, extra, replicas } => run_train(&run, init.as_deref(), extra.as_deref(), replicas)?,
        Command::DualTrain { run, extra } => {
            let mut run = run;
            run.cfg.overrides.push("regime=dual_train".into());
            run_train(&run, None, Some(&extra), 1)?
        }
        Command::PretrainRecon { cfg, data, out } => {
            let config = cfg.resolve()?;
            let images = load(&data)?;
            let (ckpt, log) = harness::pretrain_reconstruction(&config, &images)?;
            std::fs::create_dir_all(&out)?;
            ckpt.save(&out.join("pretrained.ckpt"))?;
            log.save_json(&out.join("metrics.json"))?;
            std::fs::write(out.join("steps.csv"), log.steps_csv())?;
            println!("final reconstruction loss {:.6}", log.epochs.last().map_or(f64::NAN, |e| e.mean_loss));
        }
        Command::Eval { ckpt, data, cfg, check_config } => {
            let expected = if check_config { Some(cfg.resolve()?) } else { None };
            let ckpt = Checkpoint::load(&ckpt, expected.as_ref())?;
            let report = harness::evaluate(&ckpt, None, &load(&data)?)?;
            for (t, (c, n)) in &report.per_type {
                println!("{t:<10} {:.4} ({c}/{n})", *c as f64 / *n as f64);
            }
            println!("{:<10} {:.4} ({} problems)", "overall", report.accuracy(), report.total());
            if let Some(r) = report.mean_recon {
                println!("recon mse  {r:.6}");
            }
        }
        Command::Ablate { run, flags } => {
            let config = run.cfg.resolve()?;
            let flags = flags.iter().map(|f| f.parse::<Ablation>()).collect::<stsn::Result<Vec<_>>>()?;
            let train = load(&run.train)?;
            let val = load_opt(run.val.as_deref())?;
            let test = load_opt(run.test.as_deref())?;
            if test.is_empty() {
                bail!("ablate needs --test");
            }
            let runs = harness::ablate(&config, &flags, &train, &val, &test, &options(&run))?;
            std::fs::create_dir_all(&run.out)?;
            for r in &runs {
                println!("{:<22} test accuracy {:.4}", r.name, r.test.accuracy());
                r.log.save_json(&run.out.join(format!("{}.json", r.name)))?;
            }
        }
        Command::Generate { problem_type, n, seed, offset, size, out } => {
            let types: Vec<ProblemType> = if problem_type == "all" {
                ProblemType::ALL.to_vec()
            } else {
                problem_type.split(',').map(str::parse).collect::<stsn::Result<_>>()?
            };
            let started = Instant::now();
            let problems = generate_set(&types, offset, n, seed, size)?;
            write_dataset(&problems, &out)?;
            println!("wrote {} problems to {} in {:.1}s", problems.len(), out.display(), started.elapsed().as_secs_f64());
        }
        Command::Gradcheck { seed } => {
            let started = Instant::now();
            let r = harness::micro_gradcheck(seed)?;
            println!(
                "max relative error {:.3e} over {} coordinates ({} re-checked in double-double, worst {:?}) in {:.1}s",
                r.max_rel_error,
                r.coordinates,
                r.refined,
                r.worst,
                started.elapsed().as_secs_f64()
            );
            if r.max_rel_error >= 1e-3 {
                bail!("gradient check failed");
            }
        }
        Command::Report { ckpt, metrics, samples, limit, out } => {
            let ckpt = Checkpoint::load(&ckpt, None)?;
            let log = MetricsLog::load_json(&metrics)?;
            let mut problems = load(&samples)?;
            problems.truncate(limit);
            for p in emit_report(&out, &log, &ckpt, &problems)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}
