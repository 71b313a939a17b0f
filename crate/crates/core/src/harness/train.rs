use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::PanelImage;
use crate::matrixgen::{augment, MatrixProblem, ProblemType};
use crate::model::{argmax, task_loss, total_loss, Pass, Stsn};
use crate::numeric::{Adam, AdamConfig, Gradients, Graph, ParamStore, Tensor};

use super::checkpoint::Checkpoint;
use super::config::{Ablation, Regime, TrainConfig};
use super::metrics::{EpochRecord, MetricsLog, StepRecord};

/// Key of the stream family used for evaluation passes, fixed so that the
/// same checkpoint scores the same dataset identically.
pub const EVAL_SEED: u64 = 0x5EED_E7A1;

// Stream families derived from the run seed.
const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1 << 60;
const PASS_STREAM: u64 = 2 << 60;
const EXTRA_STREAM: u64 = 3 << 60;

pub(crate) fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(index);
    r
}

/// Learning rate after `step` optimiser updates: a linear ramp from 0 to
/// `base` over `warmup` steps, constant afterwards.
pub fn learning_rate(base: f64, warmup: u64, step: u64) -> f64 {
    if warmup == 0 || step >= warmup {
        base
    } else {
        base * step as f64 / warmup as f64
    }
}

/// Stacks a problem's 16 panels, checking them against the configured size.
pub fn problem_tensor(images: &[PanelImage], config: &TrainConfig) -> Result<Tensor<f32>> {
    let want = (config.image_size, config.image_size, config.image_channels);
    if let Some(im) = images.iter().find(|im| (im.height, im.width, im.channels) != want) {
        return Err(Error::Shape(format!(
            "panel {}x{}x{} does not match configured {}x{}x{}",
            im.height, im.width, im.channels, want.0, want.1, want.2
        )));
    }
    PanelImage::stack(images)
}

/// Loss values and gradients of one problem.
struct ProblemPass {
    recon: f64,
    task: f64,
    total: f64,
    correct: bool,
    grads: Gradients<f32>,
}

#[derive(Serialize)]
struct Dump<'a> {
    step: u64,
    epoch: usize,
    problem: usize,
    recon: f64,
    task: f64,
    total: f64,
    param_norms: BTreeMap<&'a str, f64>,
}

/// Model, parameters and optimiser state of one run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Stsn,
    pub store: ParamStore<f32>,
    pub adam: Adam<f32>,
    /// Optimiser updates applied so far.
    pub step: u64,
    /// Where a diagnostic dump goes when a loss turns non-finite.
    pub dump_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let model = Stsn::new(config.model_config(), &mut store, &mut stream(config.seed, INIT_STREAM))?;
        let adam = Adam::new(&store, AdamConfig::default());
        Ok(Self { config, model, store, adam, step: 0, dump_dir: None })
    }

    /// Resumes from a full checkpoint, optimiser state included.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(ckpt.config.clone())?;
        let copied = t.store.load_from(&ckpt.params, |_| true)?;
        if copied != t.store.len() {
            return Err(Error::Format(format!("checkpoint holds {copied} of {} parameters", t.store.len())));
        }
        if let Some(adam) = &ckpt.optimizer {
            t.adam = adam.clone();
        }
        t.step = ckpt.step;
        Ok(t)
    }

    /// Copies encoder, slot-attention and decoder weights from `ckpt`; the
    /// reasoner keeps its fresh initialisation.
    pub fn load_perceptual(&mut self, ckpt: &Checkpoint) -> Result<usize> {
        if ckpt.config.architecture_hash() != self.config.architecture_hash() {
            return Err(Error::Config("pretrained checkpoint was built for another architecture".into()));
        }
        let copied = self.store.load_from(&ckpt.params, Stsn::is_perceptual)?;
        if copied == 0 {
            return Err(Error::Format("checkpoint holds no perceptual parameters".into()));
        }
        Ok(copied)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            params: self.store.clone(),
            optimizer: Some(self.adam.clone()),
            step: self.step,
        }
    }

    /// Checkpoint restricted to the perceptual branch, without optimiser.
    pub fn perceptual_checkpoint(&self) -> Checkpoint {
        let mut params = ParamStore::new();
        for (_, name, t) in self.store.iter().filter(|(_, n, _)| Stsn::is_perceptual(n)) {
            params.add(name, t.clone());
        }
        Checkpoint { config: self.config.clone(), params, optimizer: None, step: self.step }
    }

    fn images(&self, p: &MatrixProblem, rng: &mut ChaCha8Rng) -> Vec<PanelImage> {
        if self.config.augment() {
            augment(&p.images, rng)
        } else {
            p.images.clone()
        }
    }

    /// Forward and backward pass of one problem with the total loss
    /// `recon_weight·L_recon + task_weight·L_task`.
    fn problem_pass(&self, p: &MatrixProblem, recon_weight: f64, task_weight: f64, rng: &mut ChaCha8Rng) -> Result<ProblemPass> {
        let images = self.images(p, rng);
        let x = problem_tensor(&images, &self.config)?;
        let mut g = Graph::new();
        let mut pass = Pass { rng, train: true };
        let (root, recon, task, correct) = if task_weight > 0.0 {
            let nodes = self.model.forward(&mut g, &self.store, &x, &mut pass)?;
            let t = task_loss(&mut g, nodes.scores, p.answer)?;
            let t = if task_weight == 1.0 { t } else { g.scale(t, task_weight as f32) };
            let root = total_loss(&mut g, nodes.recon.loss, t, recon_weight)?;
            let correct = argmax(g.value(nodes.scores).data()) == p.answer;
            (root, nodes.recon.loss, Some(t), correct)
        } else {
            let recon = self.model.reconstruct(&mut g, &self.store, &x, &mut pass)?;
            let root = g.scale(recon.loss, recon_weight as f32);
            (root, recon.loss, None, false)
        };
        let value = |v| g.value(v).item() as f64;
        let out = ProblemPass {
            recon: value(recon),
            task: task.map_or(0.0, value),
            total: value(root),
            correct,
            grads: Gradients::empty(0),
        };
        if !out.total.is_finite() {
            return Ok(out);
        }
        Ok(ProblemPass { grads: g.backward(root)?, ..out })
    }

    fn abort_non_finite(&self, epoch: usize, problem: usize, p: &ProblemPass) -> Error {
        let dump = Dump {
            step: self.step,
            epoch,
            problem,
            recon: p.recon,
            task: p.task,
            total: p.total,
            param_norms: self.store.iter().map(|(_, n, t)| (n, (t.sq_norm() as f64).sqrt())).collect(),
        };
        let mut msg = format!(
            "non-finite loss at step {} (epoch {epoch}, problem {problem}): recon {} task {} total {}",
            self.step, p.recon, p.task, p.total
        );
        if let Some(dir) = &self.dump_dir {
            let path = dir.join(format!("nonfinite_step{}.json", self.step));
            match serde_json::to_vec_pretty(&dump).map_err(Error::from).and_then(|b| Ok(std::fs::write(&path, b)?)) {
                Ok(()) => msg.push_str(&format!("; dump written to {}", path.display())),
                Err(e) => msg.push_str(&format!("; dump failed: {e}")),
            }
        } else {
            msg.push_str(&format!("; {}", serde_json::to_string(&dump).unwrap_or_default()));
        }
        Error::Numeric(msg)
    }

    fn apply(&mut self, mut grads: Gradients<f32>, count: usize) -> Result<f64> {
        grads.scale(1.0 / count as f32);
        if !grads.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient at step {}", self.step)));
        }
        let lr = learning_rate(self.config.lr, self.config.warmup_steps, self.step + 1);
        self.adam.update(&mut self.store, &grads, lr)?;
        self.step += 1;
        Ok(lr)
    }

    fn shuffled(&self, n: usize, epoch: usize, family: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(self.config.seed, family + epoch as u64));
        order
    }

    /// One epoch of task training. Each step averages the gradients of a
    /// batch of task problems and, when `extra` is non-empty, of an equal
    /// batch of reconstruction-only problems; the two reconstruction terms
    /// are weighted equally. Returns the epoch's training accuracy and mean
    /// total loss.
    pub fn train_epoch(
        &mut self,
        epoch: usize,
        data: &[MatrixProblem],
        extra: &[MatrixProblem],
        log: &mut MetricsLog,
    ) -> Result<(f64, f64)> {
        if data.is_empty() {
            return Err(Error::Contract("empty training set".into()));
        }
        let lambda = self.config.lambda;
        let order = self.shuffled(data.len(), epoch, SHUFFLE_STREAM);
        let extra_order = self.shuffled(extra.len(), epoch, SHUFFLE_STREAM + EXTRA_STREAM);
        // With an extra set each reconstruction term carries half the weight.
        let recon_weight = if extra.is_empty() { lambda } else { lambda / 2.0 };
        let (mut correct, mut loss_sum) = (0usize, 0.0);
        for (b, batch) in order.chunks(self.config.batch_size).enumerate() {
            let mut grads = Gradients::empty(self.store.len());
            let (mut recon, mut task, mut total) = (0.0, 0.0, 0.0);
            for (k, &i) in batch.iter().enumerate() {
                let mut rng = stream(self.config.seed, PASS_STREAM + (self.step << 20) + k as u64);
                let pass = self.problem_pass(&data[i], recon_weight, 1.0, &mut rng)?;
                if !pass.total.is_finite() {
                    return Err(self.abort_non_finite(epoch, i, &pass));
                }
                grads.accumulate(&pass.grads);
                recon += pass.recon;
                task += pass.task;
                total += pass.total;
                correct += pass.correct as usize;
            }
            let n = batch.len() as f64;
            let (mut recon, task, mut total) = (recon / n, task / n, total / n);
            grads.scale(1.0 / batch.len() as f32);
            if !extra.is_empty() {
                let mut extra_grads = Gradients::empty(self.store.len());
                let (mut r_sum, mut t_sum) = (0.0, 0.0);
                for k in 0..batch.len() {
                    let j = extra_order[(b * self.config.batch_size + k) % extra.len()];
                    let mut rng = stream(self.config.seed, EXTRA_STREAM + (self.step << 20) + k as u64);
                    let pass = self.problem_pass(&extra[j], recon_weight, 0.0, &mut rng)?;
                    if !pass.total.is_finite() {
                        return Err(self.abort_non_finite(epoch, j, &pass));
                    }
                    extra_grads.accumulate(&pass.grads);
                    r_sum += pass.recon;
                    t_sum += pass.total;
                }
                extra_grads.scale(1.0 / batch.len() as f32);
                grads.accumulate(&extra_grads);
                recon = (recon + r_sum / n) / 2.0;
                total += t_sum / n;
            }
            let lr = self.apply(grads, 1)?;
            loss_sum += total;
            log.steps.push(StepRecord { step: self.step, epoch, lr, recon, task, total });
        }
        let batches = order.len().div_ceil(self.config.batch_size);
        Ok((correct as f64 / data.len() as f64, loss_sum / batches as f64))
    }

    /// One epoch on the reconstruction loss alone.
    pub fn recon_epoch(&mut self, epoch: usize, data: &[MatrixProblem], log: &mut MetricsLog) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Contract("empty image set".into()));
        }
        let order = self.shuffled(data.len(), epoch, SHUFFLE_STREAM);
        let mut loss_sum = 0.0;
        for batch in order.chunks(self.config.batch_size) {
            let mut grads = Gradients::empty(self.store.len());
            let mut recon = 0.0;
            for (k, &i) in batch.iter().enumerate() {
                let mut rng = stream(self.config.seed, PASS_STREAM + (self.step << 20) + k as u64);
                let pass = self.problem_pass(&data[i], 1.0, 0.0, &mut rng)?;
                if !pass.total.is_finite() {
                    return Err(self.abort_non_finite(epoch, i, &pass));
                }
                grads.accumulate(&pass.grads);
                recon += pass.recon;
            }
            grads.retain(&self.store, Stsn::is_perceptual);
            let lr = self.apply(grads, batch.len())?;
            let recon = recon / batch.len() as f64;
            loss_sum += recon;
            log.steps.push(StepRecord { step: self.step, epoch, lr, recon, task: 0.0, total: recon });
        }
        Ok(loss_sum / order.len().div_ceil(self.config.batch_size) as f64)
    }
}

/// Model output for one evaluated problem.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub scores: Vec<f32>,
    /// Mean squared reconstruction error, when the scorer reconstructs.
    pub recon: Option<f64>,
}

/// Anything that scores the candidates of a problem.
pub trait Scorer {
    fn predict(&mut self, index: usize, problem: &MatrixProblem) -> Result<Prediction>;
}

/// Scores with fixed randomness per problem index and no dropout.
pub struct ModelScorer<'a> {
    pub model: &'a Stsn,
    pub store: &'a ParamStore<f32>,
    pub config: &'a TrainConfig,
}

impl Scorer for ModelScorer<'_> {
    fn predict(&mut self, index: usize, problem: &MatrixProblem) -> Result<Prediction> {
        let x = problem_tensor(&problem.images, self.config)?;
        let mut rng = stream(EVAL_SEED, index as u64);
        let mut g = Graph::new();
        let nodes = self.model.forward(&mut g, self.store, &x, &mut Pass { rng: &mut rng, train: false })?;
        Ok(Prediction {
            scores: g.value(nodes.scores).data().to_vec(),
            recon: Some(g.value(nodes.recon.loss).item() as f64),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalReport {
    /// Correct and total counts per problem type.
    pub per_type: BTreeMap<String, (usize, usize)>,
    pub mean_recon: Option<f64>,
}

impl EvalReport {
    pub fn total(&self) -> usize {
        self.per_type.values().map(|v| v.1).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let correct: usize = self.per_type.values().map(|v| v.0).sum();
        correct as f64 / self.total().max(1) as f64
    }

    pub fn type_accuracy(&self, t: ProblemType) -> Option<f64> {
        self.per_type.get(t.name()).map(|&(c, n)| c as f64 / n as f64)
    }
}

/// Accuracy of argmax predictions, overall and per problem type.
pub fn evaluate_with(scorer: &mut impl Scorer, data: &[MatrixProblem]) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    let (mut recon_sum, mut recon_n) = (0.0, 0usize);
    for (i, p) in data.iter().enumerate() {
        let pred = scorer.predict(i, p)?;
        if pred.scores.len() != p.candidates.len() {
            return Err(Error::Shape(format!("{} scores for {} candidates", pred.scores.len(), p.candidates.len())));
        }
        let entry = report.per_type.entry(p.problem_type.name().to_string()).or_default();
        entry.0 += (argmax(&pred.scores) == p.answer) as usize;
        entry.1 += 1;
        if let Some(r) = pred.recon {
            recon_sum += r;
            recon_n += 1;
        }
    }
    report.mean_recon = (recon_n > 0).then(|| recon_sum / recon_n as f64);
    Ok(report)
}

impl Trainer {
    pub fn evaluate(&self, data: &[MatrixProblem]) -> Result<EvalReport> {
        evaluate_with(&mut ModelScorer { model: &self.model, store: &self.store, config: &self.config }, data)
    }
}

/// Evaluates a checkpoint; with `expected`, refuses a checkpoint whose
/// architecture differs.
pub fn evaluate(ckpt: &Checkpoint, expected: Option<&TrainConfig>, data: &[MatrixProblem]) -> Result<EvalReport> {
    if let Some(cfg) = expected {
        if cfg.architecture_hash() != ckpt.config.architecture_hash() {
            return Err(Error::Config("checkpoint config hash does not match".into()));
        }
    }
    Trainer::from_checkpoint(ckpt)?.evaluate(data)
}

/// Run controls beyond the configuration.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Perceptual weights to start from.
    pub init: Option<Checkpoint>,
    /// Evaluate on the validation set every this many epochs (0 = never).
    pub eval_every: usize,
    /// Stop once an epoch's training accuracy reaches this value.
    pub stop_at_train_accuracy: Option<f64>,
    pub dump_dir: Option<PathBuf>,
}

impl TrainOptions {
    pub fn new() -> Self {
        Self { eval_every: 1, ..Self::default() }
    }
}

pub struct TrainOutcome {
    /// Parameters with the best validation accuracy, or the final ones
    /// without validation.
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub log: MetricsLog,
}

/// Trains on `train_set`, mixing in reconstruction-only problems from
/// `extra` when it is non-empty.
pub fn train_with(
    config: &TrainConfig,
    train_set: &[MatrixProblem],
    val_set: &[MatrixProblem],
    extra: &[MatrixProblem],
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    let mut t = Trainer::new(config.clone())?;
    t.dump_dir = opts.dump_dir.clone();
    if let Some(init) = &opts.init {
        t.load_perceptual(init)?;
    }
    let mut log = MetricsLog::new(config.lambda);
    let mut best: Option<(f64, Checkpoint)> = None;
    for epoch in 0..config.epochs {
        let (train_accuracy, mean_loss) = t.train_epoch(epoch, train_set, extra, &mut log)?;
        let due = opts.eval_every > 0 && ((epoch + 1) % opts.eval_every == 0 || epoch + 1 == config.epochs);
        let val_accuracy = if !val_set.is_empty() && due { Some(t.evaluate(val_set)?.accuracy()) } else { None };
        log::info!(
            "epoch {epoch}: loss {mean_loss:.5} train acc {train_accuracy:.4} val acc {}",
            val_accuracy.map_or("-".into(), |v| format!("{v:.4}"))
        );
        log.epochs.push(EpochRecord { epoch, train_accuracy, val_accuracy, mean_loss });
        if let Some(v) = val_accuracy {
            if best.as_ref().is_none_or(|(b, _)| v > *b) {
                best = Some((v, t.checkpoint()));
            }
        }
        if opts.stop_at_train_accuracy.is_some_and(|a| train_accuracy >= a) {
            break;
        }
    }
    let last = t.checkpoint();
    let best = best.map_or_else(|| last.clone(), |(_, c)| c);
    Ok(TrainOutcome { best, last, log })
}

pub fn train(
    config: &TrainConfig,
    train_set: &[MatrixProblem],
    val_set: &[MatrixProblem],
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    train_with(config, train_set, val_set, &[], opts)
}

pub fn dual_train(
    config: &TrainConfig,
    task_set: &[MatrixProblem],
    extra_recon_set: &[MatrixProblem],
    val_set: &[MatrixProblem],
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    train_with(config, task_set, val_set, extra_recon_set, opts)
}

/// Trains encoder, slot attention and decoder on reconstruction alone and
/// returns their weights. The log uses λ = 1 since only one term exists.
pub fn pretrain_reconstruction(config: &TrainConfig, image_set: &[MatrixProblem]) -> Result<(Checkpoint, MetricsLog)> {
    let mut t = Trainer::new(config.clone())?;
    let mut log = MetricsLog::new(1.0);
    for epoch in 0..config.epochs {
        let mean_loss = t.recon_epoch(epoch, image_set, &mut log)?;
        log::info!("pretrain epoch {epoch}: recon {mean_loss:.6}");
        log.epochs.push(EpochRecord { epoch, train_accuracy: 0.0, val_accuracy: None, mean_loss });
    }
    Ok((t.perceptual_checkpoint(), log))
}

/// Runs the configured regime. `extra` feeds dual training; reconstruction
/// pretraining reuses the training images with the same epoch budget.
pub fn run_regime(
    config: &TrainConfig,
    train_set: &[MatrixProblem],
    val_set: &[MatrixProblem],
    extra: &[MatrixProblem],
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    match config.regime {
        Regime::Standard => train(config, train_set, val_set, opts),
        Regime::DualTrain => dual_train(config, train_set, extra, val_set, opts),
        Regime::ReconPretrain => {
            let (ckpt, _) = pretrain_reconstruction(config, train_set)?;
            train(config, train_set, val_set, &TrainOptions { init: Some(ckpt), ..opts.clone() })
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRun {
    pub name: String,
    pub config: TrainConfig,
    pub log: MetricsLog,
    pub test: EvalReport,
}

/// Trains the configuration as given and with one component removed,
/// evaluating both on `test_set`.
pub fn ablate(
    config: &TrainConfig,
    flags: &[Ablation],
    train_set: &[MatrixProblem],
    val_set: &[MatrixProblem],
    test_set: &[MatrixProblem],
    opts: &TrainOptions,
) -> Result<Vec<AblationRun>> {
    let flag = match flags {
        [f] => *f,
        [] => return Err(Error::Config("ablate needs one flag".into())),
        _ => return Err(Error::Config(format!("conflicting ablation flags {flags:?}: one per run"))),
    };
    if config.has(flag) {
        return Err(Error::Config(format!("{flag} is already set in the baseline configuration")));
    }
    let mut runs = Vec::new();
    for (name, cfg) in [("baseline".to_string(), config.clone()), (flag.to_string(), config.clone().with(flag))] {
        let out = train(&cfg, train_set, val_set, opts)?;
        let test = evaluate(&out.best, None, test_set)?;
        let mut log = out.log;
        for (t, &(c, n)) in &test.per_type {
            log.test_accuracy.insert(t.clone(), c as f64 / n as f64);
        }
        runs.push(AblationRun { name, config: cfg, log, test });
    }
    Ok(runs)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReplicaSummary {
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub max: f64,
    pub mean: f64,
}

/// Runs `n` seeds starting at the configured one and reports the best and
/// mean of whatever accuracy `run` returns.
pub fn replicas(config: &TrainConfig, n: usize, mut run: impl FnMut(&TrainConfig) -> Result<f64>) -> Result<ReplicaSummary> {
    if n == 0 {
        return Err(Error::Config("replicas must be at least 1".into()));
    }
    let seeds: Vec<u64> = (0..n as u64).map(|i| config.seed.wrapping_add(i)).collect();
    let accuracies = seeds
        .iter()
        .map(|&seed| run(&TrainConfig { seed, ..config.clone() }))
        .collect::<Result<Vec<_>>>()?;
    let max = accuracies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = accuracies.iter().sum::<f64>() / n as f64;
    Ok(ReplicaSummary { seeds, accuracies, max, mean })
}
