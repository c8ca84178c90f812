//! Bi-level search: weights train on the train split through the softmax
//! mixture while alpha follows either Shapley estimates (SMPQ) or its own
//! gradient (DMPQ). Also hosts policy fine-tuning.

use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::{enforce_budget, policy_cost, BudgetOutcome, CostBudget};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::game::{
    alpha_update, mc_shapley, psi_min_per_layer, ConvergenceMonitor, McConfig, MomentumState,
    ShapleyEstimate, ValueEval,
};
use crate::nn::{optimizer_step, ComputeGraph, Loss, Optimizer, OptimizerKind, TrainConfig};
use crate::seed::{derive_seed, digest_f64, sub_seed};
use crate::supernet::{EdgeKind, QuantPolicy, Supernet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchMethod {
    Smpq,
    Dmpq,
}

impl FromStr for SearchMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smpq" => Ok(Self::Smpq),
            "dmpq" => Ok(Self::Dmpq),
            other => Err(Error::Config(format!("unknown method {other:?} (expected smpq or dmpq)"))),
        }
    }
}

/// Which loss drives the DMPQ alpha gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaObjective {
    /// Joint single-level step on the training batch.
    Train,
    /// Separate step on a validation batch after each weight step.
    Val,
}

impl FromStr for AlphaObjective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            other => Err(Error::Config(format!("unknown alpha objective {other:?} (expected train or val)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    /// Target compression ratio over the 32/32 network.
    Ratio(f64),
    /// Absolute BOPs.
    Bops(f64),
}

impl Budget {
    pub fn resolve(self, mu: f64, macs: Vec<u64>) -> Result<CostBudget> {
        match self {
            Budget::Ratio(r) => CostBudget::from_ratio(r, mu, macs),
            Budget::Bops(b) => CostBudget::new(b, mu, macs),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub method: SearchMethod,
    pub epochs: usize,
    /// Leading epochs that train weights only; alpha stays put.
    pub warmup_epochs: usize,
    pub rounds_per_epoch: usize,
    pub permutations: usize,
    pub truncation: f64,
    pub xi: f64,
    pub beta: f64,
    pub lambda: f64,
    pub epsilon: f64,
    pub convergence_scale: f64,
    pub budget: Budget,
    pub mu: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub alpha_learning_rate: f64,
    pub alpha_objective: AlphaObjective,
    /// Training samples used to recalibrate activation clips each epoch.
    pub calibration_samples: usize,
    pub threads: usize,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            method: SearchMethod::Smpq,
            epochs: 10,
            warmup_epochs: 0,
            rounds_per_epoch: 1,
            permutations: 10,
            truncation: 0.5,
            xi: 0.1,
            beta: 0.8,
            lambda: 0.2,
            epsilon: 0.5,
            convergence_scale: ConvergenceMonitor::DEFAULT_SCALE,
            budget: Budget::Ratio(2.0),
            mu: 1.0,
            learning_rate: 1e-2,
            batch_size: 32,
            optimizer: OptimizerKind::Adam,
            alpha_learning_rate: 1e-2,
            alpha_objective: AlphaObjective::Train,
            calibration_samples: 256,
            threads: 1,
            seed: 0,
        }
    }
}

impl SearchConfig {
    /// The `(beta, xi) = (0.75, 0.05)` ablation setting.
    pub fn ablation_optimal() -> Self {
        Self {
            beta: 0.75,
            lambda: 0.25,
            xi: 0.05,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "ablation-optimal" => Ok(Self::ablation_optimal()),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected default or ablation-optimal)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.warmup_epochs >= self.epochs {
            return bad(format!(
                "warmup_epochs ({}) must be below epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.rounds_per_epoch == 0 {
            return bad("rounds_per_epoch must be positive".into());
        }
        if self.permutations == 0 {
            return bad("permutations must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.truncation) {
            return bad(format!("truncation must lie in [0, 1], got {}", self.truncation));
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.convergence_scale > 0.0 && self.convergence_scale.is_finite()) {
            return bad(format!("convergence_scale must be positive, got {}", self.convergence_scale));
        }
        if !(self.alpha_learning_rate >= 0.0 && self.alpha_learning_rate.is_finite()) {
            return bad(format!("alpha_learning_rate must be non-negative, got {}", self.alpha_learning_rate));
        }
        if self.calibration_samples == 0 {
            return bad("calibration_samples must be positive".into());
        }
        if self.threads == 0 {
            return bad("threads must be positive".into());
        }
        match self.budget {
            Budget::Ratio(r) | Budget::Bops(r) if !(r > 0.0 && r.is_finite()) => {
                return bad(format!("budget must be positive, got {r}"));
            }
            _ => {}
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return bad(format!("mu must be non-negative, got {}", self.mu));
        }
        MomentumState::new(1, self.beta, self.lambda, self.xi).map_err(|e| Error::Config(e.to_string()))?;
        self.train_config().validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            optimizer: self.optimizer,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation accuracy of the current winner-take-all policy.
    pub val_accuracy: f64,
    /// Empty for DMPQ.
    pub delta_psi: Option<f64>,
    pub alpha_digest: String,
    #[serde(skip)]
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SearchTrajectory {
    pub records: Vec<TrajectoryRecord>,
}

impl SearchTrajectory {
    fn push(&mut self, rec: TrajectoryRecord) {
        debug_assert!(self.records.last().is_none_or(|r| r.iteration < rec.iteration));
        self.records.push(rec);
    }

    /// Deterministic columns only; `header` lines are written as `#` comments.
    pub fn write_csv<W: Write>(&self, mut w: W, header: &[String]) -> Result<()> {
        for h in header {
            writeln!(w, "# {h}")?;
        }
        let mut csv = csv::Writer::from_writer(w);
        for r in &self.records {
            csv.serialize(r)?;
        }
        csv.flush()?;
        Ok(())
    }

    pub fn write_timings_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["iteration", "wall_time_s"])?;
        for r in &self.records {
            csv.write_record([r.iteration.to_string(), r.wall_time_s.to_string()])?;
        }
        csv.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyRow {
    pub layer: usize,
    pub kind: EdgeKind,
    pub bit: u32,
    pub psi: f64,
    pub samples: u64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapleyRound {
    pub iteration: usize,
    pub rows: Vec<ShapleyRow>,
    pub evaluations: usize,
    pub truncated_permutations: usize,
}

impl ShapleyRound {
    pub fn write_csv<W: Write>(&self, mut w: W, header: &[String]) -> Result<()> {
        for h in header {
            writeln!(w, "# {h}")?;
        }
        let mut csv = csv::Writer::from_writer(w);
        for r in &self.rows {
            csv.serialize(r)?;
        }
        csv.flush()?;
        Ok(())
    }
}

pub fn shapley_rows(supernet: &Supernet, estimates: &[ShapleyEstimate]) -> Vec<ShapleyRow> {
    supernet
        .players()
        .iter()
        .zip(estimates)
        .map(|(p, e)| ShapleyRow {
            layer: p.edge.layer,
            kind: p.edge.kind,
            bit: p.bit.bits(),
            psi: e.psi,
            samples: e.samples,
            variance: e.variance(),
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub policy: QuantPolicy,
    pub budget: BudgetOutcome,
    pub trajectory: SearchTrajectory,
    pub shapley: Vec<ShapleyRound>,
    pub converged: bool,
}

/// Called after every epoch with the epoch index.
pub type EpochHook<'a> = dyn FnMut(usize, &Supernet) -> Result<()> + 'a;

fn check_data(supernet: &Supernet, data: &Dataset, what: &str) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Data(format!("{what} split is empty")));
    }
    if data.sample_shape() != supernet.graph().input_shape() {
        return Err(Error::Data(format!(
            "{what} samples have shape {:?}, network expects {:?}",
            data.sample_shape(),
            supernet.graph().input_shape()
        )));
    }
    Ok(())
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

fn params_digest(graph: &ComputeGraph) -> String {
    let flat: Vec<f64> = graph.params().iter().flat_map(|p| p.value.data().to_vec()).collect();
    digest_f64(&flat)
}

struct AlphaStep<'a> {
    opt: &'a mut Optimizer,
    objective: AlphaObjective,
    val: &'a Dataset,
    batch_size: usize,
    cursor: usize,
}

fn batch_loss(graph: &mut ComputeGraph, data: &Dataset, idx: &[usize]) -> Result<f64> {
    let x = data.inputs.select_rows(idx);
    let y: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
    graph.forward(&x)?;
    graph.backward(&y, Loss::CrossEntropy { scale: 1.0 })
}

fn step_alpha(supernet: &mut Supernet, opt: &mut Optimizer) -> Result<()> {
    let grads = supernet.alpha_grads();
    let mut alpha = supernet.alpha_flat();
    opt.begin_step();
    opt.update(0, &mut alpha, &grads);
    supernet.set_alpha_flat(&alpha)
}

fn epoch_loop(
    supernet: &mut Supernet,
    train: &Dataset,
    opt: &mut Optimizer,
    batch_size: usize,
    seed: u64,
    mut alpha: Option<AlphaStep<'_>>,
) -> Result<f64> {
    check_data(supernet, train, "train")?;
    let order = shuffled(train.len(), seed);
    let mut total = 0.0;
    for (b, chunk) in order.chunks(batch_size).enumerate() {
        let loss = batch_loss(supernet.graph_mut(), train, chunk)?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite training loss {loss} at batch {b}")));
        }
        total += loss * chunk.len() as f64;
        let joint = matches!(alpha, Some(AlphaStep { objective: AlphaObjective::Train, .. }));
        let grads = joint.then(|| supernet.alpha_grads());
        optimizer_step(supernet.graph_mut(), opt);
        if let Some(a) = alpha.as_mut() {
            match a.objective {
                AlphaObjective::Train => {
                    let mut al = supernet.alpha_flat();
                    a.opt.begin_step();
                    a.opt.update(0, &mut al, &grads.expect("joint step"));
                    supernet.set_alpha_flat(&al)?;
                }
                AlphaObjective::Val => {
                    let n = a.val.len();
                    let idx: Vec<usize> = (0..a.batch_size.min(n)).map(|k| (a.cursor + k) % n).collect();
                    a.cursor = (a.cursor + idx.len()) % n;
                    let vl = batch_loss(supernet.graph_mut(), a.val, &idx)?;
                    if !vl.is_finite() {
                        return Err(Error::Numerical(format!("non-finite validation loss {vl} at batch {b}")));
                    }
                    step_alpha(supernet, a.opt)?;
                }
            }
        }
    }
    Ok(total / train.len() as f64)
}

/// One epoch of weight training through the softmax mixture; alpha is
/// left untouched. Returns the sample-averaged training loss.
pub fn train_weights_epoch(
    supernet: &mut Supernet,
    train: &Dataset,
    opt: &mut Optimizer,
    batch_size: usize,
    seed: u64,
) -> Result<f64> {
    epoch_loop(supernet, train, opt, batch_size, seed, None)
}

fn calibrate(supernet: &mut Supernet, train: &Dataset, samples: usize) -> Result<()> {
    let idx: Vec<usize> = (0..samples.min(train.len())).collect();
    supernet.calibrate(&train.inputs.select_rows(&idx))
}

fn policy_val_accuracy(supernet: &Supernet, val: &Dataset) -> Result<f64> {
    let quant = supernet.policy_quant(&supernet.discretize())?;
    supernet.graph().accuracy_with(&val.inputs, &val.labels, &quant)
}

pub fn search(supernet: &mut Supernet, train: &Dataset, val: &Dataset, cfg: &SearchConfig) -> Result<SearchOutcome> {
    search_with_hook(supernet, train, val, cfg, &mut |_, _| Ok(()))
}

pub fn search_with_hook(
    supernet: &mut Supernet,
    train: &Dataset,
    val: &Dataset,
    cfg: &SearchConfig,
    hook: &mut EpochHook<'_>,
) -> Result<SearchOutcome> {
    match cfg.method {
        SearchMethod::Smpq => smpq_search_with_hook(supernet, train, val, cfg, hook),
        SearchMethod::Dmpq => dmpq_search_with_hook(supernet, train, val, cfg, hook),
    }
}

pub fn smpq_search(supernet: &mut Supernet, train: &Dataset, val: &Dataset, cfg: &SearchConfig) -> Result<SearchOutcome> {
    smpq_search_with_hook(supernet, train, val, cfg, &mut |_, _| Ok(()))
}

/// Per epoch: train weights, then with weights frozen run Monte-Carlo
/// Shapley rounds and move alpha along the momentum direction. Stops at
/// the epoch limit or once the convergence monitor fires.
pub fn smpq_search_with_hook(
    supernet: &mut Supernet,
    train: &Dataset,
    val: &Dataset,
    cfg: &SearchConfig,
    hook: &mut EpochHook<'_>,
) -> Result<SearchOutcome> {
    if cfg.method != SearchMethod::Smpq {
        return Err(Error::Config("smpq_search called with method dmpq".into()));
    }
    cfg.validate()?;
    check_data(supernet, train, "train")?;
    check_data(supernet, val, "validation")?;
    let budget = cfg.budget.resolve(cfg.mu, supernet.graph().macs().to_vec())?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut momentum = MomentumState::new(supernet.player_count(), cfg.beta, cfg.lambda, cfg.xi)?;
    let mut monitor = ConvergenceMonitor::new(cfg.epsilon, cfg.convergence_scale)?;
    let layer_players = supernet.layer_players();
    let shuffle_seed = derive_seed(cfg.seed, "search.shuffle");
    let shapley_seed = derive_seed(cfg.seed, "search.shapley");
    let start = Instant::now();
    let mut trajectory = SearchTrajectory::default();
    let mut rounds = Vec::new();
    let mut converged = false;
    let mut iteration = 0;
    'epochs: for epoch in 0..cfg.epochs {
        calibrate(supernet, train, cfg.calibration_samples)?;
        let loss = train_weights_epoch(supernet, train, &mut opt, cfg.batch_size, sub_seed(shuffle_seed, epoch as u64))?;
        let rounds_now = if epoch < cfg.warmup_epochs { 0 } else { cfg.rounds_per_epoch };
        for _ in 0..rounds_now {
            let before = params_digest(supernet.graph());
            let mc = {
                let vf = ValueEval::new(supernet, &val.inputs, &val.labels, &budget)?;
                mc_shapley(
                    &vf,
                    &McConfig {
                        permutations: cfg.permutations,
                        truncation: cfg.truncation,
                        seed: sub_seed(shapley_seed, iteration as u64),
                        threads: cfg.threads,
                    },
                )?
            };
            assert_eq!(before, params_digest(supernet.graph()), "weights changed during a Shapley round");
            let psi: Vec<f64> = mc.estimates.iter().map(|e| e.psi).collect();
            if psi.iter().any(|p| !p.is_finite()) {
                return Err(Error::Numerical(format!("non-finite Shapley estimate in round {iteration}")));
            }
            momentum.update(&psi);
            let mut alpha = supernet.alpha_flat();
            alpha_update(&mut alpha, &momentum);
            supernet.set_alpha_flat(&alpha)?;
            let stop = monitor.check(&psi_min_per_layer(&psi, &layer_players));
            rounds.push(ShapleyRound {
                iteration,
                rows: shapley_rows(supernet, &mc.estimates),
                evaluations: mc.evaluations,
                truncated_permutations: mc.truncated_permutations,
            });
            trajectory.push(TrajectoryRecord {
                iteration,
                epoch,
                train_loss: loss,
                val_accuracy: policy_val_accuracy(supernet, val)?,
                delta_psi: monitor.history.last().copied(),
                alpha_digest: digest_f64(&supernet.alpha_flat()),
                wall_time_s: start.elapsed().as_secs_f64(),
            });
            iteration += 1;
            if stop {
                converged = true;
                hook(epoch, supernet)?;
                break 'epochs;
            }
        }
        hook(epoch, supernet)?;
    }
    let outcome = enforce_budget(supernet, &budget)?;
    Ok(SearchOutcome {
        policy: outcome.policy.clone(),
        budget: outcome,
        trajectory,
        shapley: rounds,
        converged,
    })
}

pub fn dmpq_search(supernet: &mut Supernet, train: &Dataset, val: &Dataset, cfg: &SearchConfig) -> Result<SearchOutcome> {
    dmpq_search_with_hook(supernet, train, val, cfg, &mut |_, _| Ok(()))
}

/// Differentiable baseline: alpha gets its own Adam state and is stepped
/// on its softmax-mixture gradient every batch.
pub fn dmpq_search_with_hook(
    supernet: &mut Supernet,
    train: &Dataset,
    val: &Dataset,
    cfg: &SearchConfig,
    hook: &mut EpochHook<'_>,
) -> Result<SearchOutcome> {
    if cfg.method != SearchMethod::Dmpq {
        return Err(Error::Config("dmpq_search called with method smpq".into()));
    }
    cfg.validate()?;
    check_data(supernet, train, "train")?;
    check_data(supernet, val, "validation")?;
    let budget = cfg.budget.resolve(cfg.mu, supernet.graph().macs().to_vec())?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut alpha_opt = Optimizer::new(OptimizerKind::Adam, cfg.alpha_learning_rate);
    let shuffle_seed = derive_seed(cfg.seed, "search.shuffle");
    let start = Instant::now();
    let mut trajectory = SearchTrajectory::default();
    for epoch in 0..cfg.epochs {
        calibrate(supernet, train, cfg.calibration_samples)?;
        let step = (epoch >= cfg.warmup_epochs).then(|| AlphaStep {
            opt: &mut alpha_opt,
            objective: cfg.alpha_objective,
            val,
            batch_size: cfg.batch_size,
            cursor: 0,
        });
        let loss = epoch_loop(
            supernet,
            train,
            &mut opt,
            cfg.batch_size,
            sub_seed(shuffle_seed, epoch as u64),
            step,
        )?;
        trajectory.push(TrajectoryRecord {
            iteration: epoch,
            epoch,
            train_loss: loss,
            val_accuracy: policy_val_accuracy(supernet, val)?,
            delta_psi: None,
            alpha_digest: digest_f64(&supernet.alpha_flat()),
            wall_time_s: start.elapsed().as_secs_f64(),
        });
        hook(epoch, supernet)?;
    }
    let outcome = enforce_budget(supernet, &budget)?;
    Ok(SearchOutcome {
        policy: outcome.policy.clone(),
        budget: outcome,
        trajectory,
        shapley: Vec::new(),
        converged: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneMetrics {
    pub epochs: usize,
    pub losses: Vec<f64>,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub bops: f64,
    pub compression_ratio: f64,
}

/// Trains a graph whose quantization is already fixed.
pub fn finetune_graph(
    mut graph: ComputeGraph,
    policy: &QuantPolicy,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<(ComputeGraph, FinetuneMetrics)> {
    cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
    let cost = policy_cost(policy, graph.macs())?;
    let mut opt = Optimizer::from_config(cfg);
    let shuffle_seed = derive_seed(cfg.seed, "finetune.shuffle");
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = shuffled(train.len(), sub_seed(shuffle_seed, epoch as u64));
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let loss = batch_loss(&mut graph, train, chunk)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite fine-tuning loss {loss} at epoch {epoch}, batch {b}"
                )));
            }
            total += loss * chunk.len() as f64;
            optimizer_step(&mut graph, &mut opt);
        }
        losses.push(total / train.len() as f64);
    }
    let metrics = FinetuneMetrics {
        epochs: cfg.epochs,
        losses,
        train_accuracy: graph.accuracy(&train.inputs, &train.labels)?,
        val_accuracy: graph.accuracy(&val.inputs, &val.labels)?,
        bops: cost.bops,
        compression_ratio: cost.compression_ratio,
    };
    Ok((graph, metrics))
}

/// Inherits the supernet weights under `policy` and trains for
/// `cfg.epochs` epochs.
pub fn finetune(
    supernet: &Supernet,
    policy: &QuantPolicy,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<(ComputeGraph, FinetuneMetrics)> {
    check_data(supernet, train, "train")?;
    check_data(supernet, val, "validation")?;
    let graph = supernet.apply_policy(policy)?;
    finetune_graph(graph, policy, train, val, cfg)
}
