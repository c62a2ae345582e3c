//! Fitness evaluation: a training-based evaluator and deterministic
//! surrogates for exercising the search machinery.
//!
//! Every failure path (shapes, memory, divergence) produces a
//! [`FitnessResult`] with fitness 0 and a reason instead of an error.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::TensorShape;
use crate::data::{augment_batch, Dataset};
use crate::genome::Genotype;
use crate::nn::{BuildOptions, Network, NnError, Optimizer, OptimizerKind, Tensor4};
use crate::phenotype::{decode, NodeOp, ShapedGraph};
use crate::rng::Rng;

/// 2 GiB at the configured batch size.
pub const DEFAULT_MEMORY_BUDGET: u64 = 2 << 30;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("epoch {epoch} outside 1..={epochs}")]
    EpochOutOfRange { epoch: usize, epochs: usize },
    #[error("unknown surrogate {0:?} (expected active_count_ratio, target_active_count(K) or depth_reward)")]
    UnknownSurrogate(String),
    #[error("estimated {needed} bytes exceeds the memory budget of {budget} bytes")]
    OutOfMemoryBudget { needed: u64, budget: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub initial_lr: f64,
    /// `(epoch, lr)` change points; the new rate applies from that epoch on.
    pub lr_schedule: Vec<(usize, f64)>,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub augmentation: bool,
    /// Fitness is the best validation accuracy over this many final epochs.
    pub fitness_window: usize,
    /// Upper bound on [`ShapedGraph::estimate_memory`] at `batch_size`.
    pub memory_budget: u64,
}

impl TrainConfig {
    /// Adam, 50 epochs, lr 0.01 dropped tenfold at epoch 30.
    pub fn search() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::ADAM_DEFAULT,
            initial_lr: 0.01,
            lr_schedule: vec![(30, 0.001)],
            epochs: 50,
            batch_size: 128,
            weight_decay: 1e-4,
            augmentation: true,
            fitness_window: 10,
            memory_budget: DEFAULT_MEMORY_BUDGET,
        }
    }

    /// SGD with momentum, 500 epochs, lr 0.01 -> 0.1 at 5 -> 0.01 at 250 ->
    /// 0.001 at 375.
    pub fn retrain() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::SGD_DEFAULT,
            initial_lr: 0.01,
            lr_schedule: vec![(5, 0.1), (250, 0.01), (375, 0.001)],
            epochs: 500,
            batch_size: 128,
            weight_decay: 5e-4,
            augmentation: true,
            fitness_window: 10,
            memory_budget: DEFAULT_MEMORY_BUDGET,
        }
    }

    /// Search schedule shrunk to a few epochs for single-core runs on small
    /// synthetic images.
    pub fn desk_search() -> Self {
        TrainConfig {
            epochs: 2,
            lr_schedule: vec![(2, 0.001)],
            batch_size: 64,
            augmentation: false,
            fitness_window: 2,
            memory_budget: 256 << 20,
            ..TrainConfig::search()
        }
    }

    /// Retrain schedule shrunk the same way.
    pub fn desk_retrain() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::SGD_DEFAULT,
            initial_lr: 0.01,
            lr_schedule: vec![(2, 0.1), (8, 0.01), (10, 0.001)],
            epochs: 10,
            batch_size: 64,
            augmentation: false,
            ..TrainConfig::retrain()
        }
    }
}

/// Learning rate for 1-based `epoch`: piecewise constant, switching at each
/// change point.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> Result<f64, EvalError> {
    if epoch == 0 || epoch > cfg.epochs {
        return Err(EvalError::EpochOutOfRange {
            epoch,
            epochs: cfg.epochs,
        });
    }
    Ok(cfg
        .lr_schedule
        .iter()
        .filter(|(e, _)| *e <= epoch)
        .max_by_key(|(e, _)| *e)
        .map_or(cfg.initial_lr, |&(_, lr)| lr))
}

/// Maximum of the last `min(window, len)` entries; 0 for an empty trace.
pub fn window_fitness(trace: &[f64], window: usize) -> f64 {
    let start = trace.len().saturating_sub(window.max(1));
    trace[start..].iter().copied().fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail")]
pub enum FailureReason {
    InvalidArchitecture,
    OutOfMemoryBudget,
    Diverged,
    /// The evaluator itself failed (error or panic); the message is kept.
    EvaluatorError(String),
}

impl fmt::Display for FailureReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FailureReason::InvalidArchitecture => f.write_str("InvalidArchitecture"),
            FailureReason::OutOfMemoryBudget => f.write_str("OutOfMemoryBudget"),
            FailureReason::Diverged => f.write_str("Diverged"),
            FailureReason::EvaluatorError(m) => write!(f, "EvaluatorError: {m}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitnessResult {
    pub fitness: f64,
    pub val_accuracies: Vec<f64>,
    pub test_accuracy: Option<f64>,
    pub param_count: usize,
    pub epochs_trained: usize,
    pub wall_seconds: f64,
    pub failure: Option<FailureReason>,
}

impl FitnessResult {
    pub fn success(fitness: f64, param_count: usize) -> Self {
        FitnessResult {
            fitness,
            val_accuracies: Vec::new(),
            test_accuracy: None,
            param_count,
            epochs_trained: 0,
            wall_seconds: 0.0,
            failure: None,
        }
    }

    pub fn failed(reason: FailureReason, param_count: usize) -> Self {
        FitnessResult {
            failure: Some(reason),
            ..FitnessResult::success(0.0, param_count)
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("fitness result serializes")
    }
}

/// Contract for fitness functions used by the search. Implementations must
/// tolerate concurrent calls on distinct genotypes.
pub trait Evaluator: Sync {
    /// Stable identifier recorded in run manifests and checkpoints.
    fn id(&self) -> String;

    fn evaluate(&self, genotype: &Genotype, rng: &mut Rng) -> FitnessResult;
}

/// Shape inference plus the memory check performed before any training.
pub fn build_network(
    graph: &ShapedGraph,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<Network<f32>, EvalError> {
    let needed = graph.estimate_memory(cfg.batch_size).total_bytes as u64;
    if needed > cfg.memory_budget {
        return Err(EvalError::OutOfMemoryBudget {
            needed,
            budget: cfg.memory_budget,
        });
    }
    Ok(Network::build(graph, rng, BuildOptions::default()))
}

/// Top-1 accuracy in inference mode.
pub fn accuracy(net: &mut Network<f32>, ds: &Dataset, batch: usize) -> Result<f64, NnError> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let predicted = net.predict(&ds.images, batch)?;
    let hits = predicted.iter().zip(&ds.labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / ds.len() as f64)
}

/// Runs one epoch of minibatch training over a fresh shuffle.
fn train_epoch(
    net: &mut Network<f32>,
    opt: &mut Optimizer<f32>,
    train: &Dataset,
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut Rng,
) -> Result<(), NnError> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(rng);
    for chunk in order.chunks(cfg.batch_size.max(1)) {
        let mut x: Tensor4<f32> = train.images.gather(chunk);
        if cfg.augmentation {
            x = augment_batch(&x, rng);
        }
        let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
        net.loss_and_grad(&x, &labels)?;
        opt.step(net.params_mut(), lr)?;
        if net.params().iter().any(|p| p.value.iter().any(|v| !v.is_finite())) {
            return Err(NnError::TrainingDiverged);
        }
    }
    Ok(())
}

/// Outcome of [`train`]: the fitness record and, unless training could not
/// start, the trained network.
pub struct Trained {
    pub result: FitnessResult,
    pub network: Option<Network<f32>>,
}

/// Decodes, shape-checks, memory-checks and trains `genotype`, measuring
/// accuracy on `eval` after every epoch. Fitness is the best accuracy over
/// the trailing `fitness_window` epochs.
pub fn train(genotype: &Genotype, train: &Dataset, eval: &Dataset, cfg: &TrainConfig, rng: &mut Rng) -> Trained {
    let started = Instant::now();
    let finish = |mut result: FitnessResult, network| {
        result.wall_seconds = started.elapsed().as_secs_f64();
        Trained { result, network }
    };
    let graph = match decode(genotype).infer_shapes(train.shape(), train.classes) {
        Ok(g) => g,
        Err(_) => return finish(FitnessResult::failed(FailureReason::InvalidArchitecture, 0), None),
    };
    let params = graph.param_count();
    let mut net = match build_network(&graph, cfg, rng) {
        Ok(n) => n,
        Err(_) => return finish(FitnessResult::failed(FailureReason::OutOfMemoryBudget, params), None),
    };
    let mut opt = Optimizer::new(cfg.optimizer, cfg.weight_decay);
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let lr = lr_at(cfg, epoch).expect("epoch within range");
        let step = train_epoch(&mut net, &mut opt, train, cfg, lr, rng).and_then(|_| accuracy(&mut net, eval, 500));
        match step {
            Ok(acc) => trace.push(acc),
            Err(NnError::TrainingDiverged) => {
                let mut r = FitnessResult::failed(FailureReason::Diverged, params);
                r.val_accuracies = trace;
                r.epochs_trained = epoch;
                return finish(r, Some(net));
            }
            Err(e) => {
                let mut r = FitnessResult::failed(FailureReason::EvaluatorError(e.to_string()), params);
                r.epochs_trained = epoch;
                return finish(r, Some(net));
            }
        }
    }
    let mut r = FitnessResult::success(window_fitness(&trace, cfg.fitness_window), params);
    r.val_accuracies = trace;
    r.epochs_trained = cfg.epochs;
    finish(r, Some(net))
}

/// Fitness by training on a fixed train/validation split.
pub struct TrainingEvaluator {
    pub train: Dataset,
    pub val: Dataset,
    pub cfg: TrainConfig,
}

impl Evaluator for TrainingEvaluator {
    fn id(&self) -> String {
        "train".into()
    }

    fn evaluate(&self, genotype: &Genotype, rng: &mut Rng) -> FitnessResult {
        train(genotype, &self.train, &self.val, &self.cfg, rng).result
    }
}

/// Trains with the retrain schedule and reports test accuracy after the
/// last epoch.
pub fn retrain(genotype: &Genotype, train_set: &Dataset, test: &Dataset, cfg: &TrainConfig, rng: &mut Rng) -> Trained {
    let mut out = train(genotype, train_set, test, cfg, rng);
    if out.result.failure.is_none() {
        out.result.test_accuracy = out.result.val_accuracies.last().copied();
    }
    out
}

/// Cheap deterministic fitness functions computed from the decoded graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Surrogate {
    /// Active nodes divided by the configured maximum.
    ActiveCountRatio,
    /// `1 / (1 + |active - K|)`, peaking at exactly `K` active nodes.
    TargetActiveCount(usize),
    /// Function nodes on the longest input-to-output path divided by the
    /// grid column count.
    DepthReward,
}

impl fmt::Display for Surrogate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Surrogate::ActiveCountRatio => f.write_str("active_count_ratio"),
            Surrogate::TargetActiveCount(k) => write!(f, "target_active_count({k})"),
            Surrogate::DepthReward => f.write_str("depth_reward"),
        }
    }
}

impl FromStr for Surrogate {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        match s {
            "active_count_ratio" => return Ok(Surrogate::ActiveCountRatio),
            "depth_reward" => return Ok(Surrogate::DepthReward),
            _ => {}
        }
        s.strip_prefix("target_active_count(")
            .and_then(|rest| rest.strip_suffix(')'))
            .and_then(|k| k.trim().parse().ok())
            .map(Surrogate::TargetActiveCount)
            .ok_or_else(|| EvalError::UnknownSurrogate(s.to_string()))
    }
}

fn depth(genotype: &Genotype) -> usize {
    let graph = decode(genotype);
    let mut depth = std::collections::HashMap::new();
    let mut deepest = 0;
    for node in &graph.nodes {
        let below = node.inputs.iter().map(|p| depth[p]).max().unwrap_or(0);
        let d = match node.op {
            NodeOp::Function(_) => below + 1,
            _ => below,
        };
        deepest = deepest.max(d);
        depth.insert(node.id, d);
    }
    deepest
}

impl Surrogate {
    pub fn score(&self, genotype: &Genotype) -> f64 {
        let cfg = genotype.config();
        let active = genotype.active_count();
        match *self {
            Surrogate::ActiveCountRatio => active as f64 / cfg.max_active.max(1) as f64,
            Surrogate::TargetActiveCount(k) => 1.0 / (1.0 + active.abs_diff(k) as f64),
            Surrogate::DepthReward => (depth(genotype) as f64 / cfg.cols.max(1) as f64).min(1.0),
        }
    }
}

/// A surrogate with the data shape used to report parameter counts.
pub struct SurrogateEvaluator {
    pub surrogate: Surrogate,
    pub input: TensorShape,
    pub classes: usize,
}

impl SurrogateEvaluator {
    pub fn new(surrogate: Surrogate, input: TensorShape, classes: usize) -> Self {
        SurrogateEvaluator {
            surrogate,
            input,
            classes,
        }
    }
}

impl Evaluator for SurrogateEvaluator {
    fn id(&self) -> String {
        format!("surrogate:{}", self.surrogate)
    }

    /// Wall time is reported as 0 so that histories stay byte-identical.
    fn evaluate(&self, genotype: &Genotype, _rng: &mut Rng) -> FitnessResult {
        let params = decode(genotype)
            .infer_shapes(self.input, self.classes)
            .map_or(0, |g| g.param_count());
        FitnessResult::success(self.surrogate.score(genotype), params)
    }
}
