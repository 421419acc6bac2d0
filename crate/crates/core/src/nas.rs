//! Single-path one-shot supernet training, evolutionary search and
//! finetuning of the selected path.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::{AdapterMode, GrowOp, PathModel, PathSpec, Supernet};
use crate::numerics::{adam_step, OptimizerState, ParamId, ParamStore, Precision, Seeds, StreamRng, Tape};
use crate::sampling::{choose_epoch_strategy, sample_path, SamplerConfig, SimilarityTable, Strategy};
use crate::taskdata::{augment_batch, AugmentPolicy, Samples};
use crate::vit::{DropPath, LinearParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub supernet_epochs: usize,
    pub batches_per_epoch_min: usize,
    pub batch_size: usize,
    pub evo_generations: usize,
    pub population: usize,
    pub mutation_prob: f64,
    pub n_mutants: usize,
    pub n_crossover: usize,
    pub crossover_pool: usize,
    pub keep: usize,
    pub finetune_epochs: usize,
    pub finetune_batches_min: usize,
    pub label_smoothing: f64,
    pub supernet_lr: f64,
    pub finetune_lr: f64,
    pub drop_path: f64,
    /// Samples per forward pass when evaluating.
    pub eval_chunk: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            supernet_epochs: 300,
            batches_per_epoch_min: 15,
            batch_size: 16,
            evo_generations: 20,
            population: 50,
            mutation_prob: 0.1,
            n_mutants: 25,
            n_crossover: 25,
            crossover_pool: 10,
            keep: 50,
            finetune_epochs: 30,
            finetune_batches_min: 30,
            label_smoothing: 0.1,
            supernet_lr: 1e-3,
            finetune_lr: 1e-3,
            drop_path: 0.25,
            eval_chunk: 128,
        }
    }
}

impl SearchConfig {
    pub fn tiny() -> Self {
        Self { supernet_epochs: 60, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Input(m));
        if self.n_mutants + self.n_crossover != self.population {
            return bad(format!(
                "n_mutants + n_crossover = {} but population is {}",
                self.n_mutants + self.n_crossover,
                self.population
            ));
        }
        if self.population == 0 || self.keep == 0 || self.crossover_pool == 0 {
            return bad("population, keep and crossover_pool must be positive".into());
        }
        if self.batch_size == 0 || self.eval_chunk == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.mutation_prob) {
            return bad(format!("mutation_prob {} outside [0, 1]", self.mutation_prob));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) || !(0.0..1.0).contains(&self.drop_path) {
            return bad("label_smoothing and drop_path must lie in [0, 1)".into());
        }
        if !(self.supernet_lr > 0.0 && self.finetune_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        Ok(())
    }

    /// Optimizer steps in one epoch over `n` samples.
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size).max(self.batches_per_epoch_min)
    }
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub task: usize,
    pub phase: String,
    pub epoch_or_gen: usize,
    pub strategy: Option<Strategy>,
    pub loss: Option<f64>,
    pub fitness_best: Option<f64>,
    pub fitness_mean: Option<f64>,
    pub params_added: Option<usize>,
}

impl LogRecord {
    pub fn epoch(task: usize, phase: &str, epoch: usize, strategy: Option<Strategy>, loss: f64) -> Self {
        Self {
            task,
            phase: phase.into(),
            epoch_or_gen: epoch,
            strategy,
            loss: Some(loss),
            fitness_best: None,
            fitness_mean: None,
            params_added: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("serializable")
    }
}

/// Where each training step's path comes from.
pub trait PathSource {
    /// Called once per epoch; the returned strategy is logged.
    fn begin_epoch(&mut self, epoch: usize) -> Option<Strategy>;
    fn next_path(&mut self) -> Result<PathSpec>;
}

/// The same path every step.
pub struct FixedPath(pub PathSpec);

impl PathSource for FixedPath {
    fn begin_epoch(&mut self, _: usize) -> Option<Strategy> {
        None
    }
    fn next_path(&mut self) -> Result<PathSpec> {
        Ok(self.0.clone())
    }
}

/// Epoch-wise exploration–exploitation sampling over a supernet.
pub struct SupernetSampler<'a> {
    pub task: usize,
    pub candidates: &'a [Vec<GrowOp>],
    pub table: Option<&'a SimilarityTable>,
    pub config: &'a SamplerConfig,
    pub rng: StreamRng,
    strategy: Strategy,
}

impl<'a> SupernetSampler<'a> {
    pub fn new(
        task: usize,
        candidates: &'a [Vec<GrowOp>],
        table: Option<&'a SimilarityTable>,
        config: &'a SamplerConfig,
        seeds: &Seeds,
    ) -> Self {
        let rng = seeds.stream(&format!("{}/supernet", config.stream));
        Self { task, candidates, table, config, rng, strategy: Strategy::Uniform }
    }
}

impl PathSource for SupernetSampler<'_> {
    fn begin_epoch(&mut self, _: usize) -> Option<Strategy> {
        self.strategy = if self.config.hierarchical && self.table.is_some() {
            choose_epoch_strategy(self.config.epsilon1, &mut self.rng)
        } else {
            Strategy::Uniform
        };
        Some(self.strategy)
    }

    fn next_path(&mut self) -> Result<PathSpec> {
        sample_path(self.strategy, self.task, self.candidates, self.table, &mut self.rng)
    }
}

/// Settings of one training loop.
#[derive(Debug, Clone)]
pub struct LoopConfig {
    pub task: usize,
    pub phase: String,
    pub epochs: usize,
    pub lr: f64,
    pub drop_path: f64,
    pub smoothing: f64,
    pub batch_size: usize,
    pub min_batches: usize,
    pub augment: AugmentPolicy,
    pub precision: Precision,
    /// Per-parameter learning-rate multipliers.
    pub lr_scales: Vec<(ParamId, f64)>,
}

impl LoopConfig {
    pub fn from_search(task: usize, phase: &str, epochs: usize, lr: f64, cfg: &SearchConfig, precision: Precision) -> Self {
        Self {
            task,
            phase: phase.into(),
            epochs,
            lr,
            drop_path: 0.0,
            smoothing: cfg.label_smoothing,
            batch_size: cfg.batch_size,
            min_batches: cfg.batches_per_epoch_min,
            augment: AugmentPolicy::off(),
            precision,
            lr_scales: Vec::new(),
        }
    }
}

/// Minibatch Adam on a cosine schedule. Only parameters the sampled path
/// touches receive gradients in a step.
pub fn train_loop(
    store: &mut ParamStore,
    model: &PathModel<'_>,
    data: &Samples,
    lc: &LoopConfig,
    seeds: &Seeds,
    paths: &mut dyn PathSource,
    mut on_step: impl FnMut(&ParamStore, &PathSpec, &crate::numerics::Gradients),
) -> Result<Vec<LogRecord>> {
    if data.is_empty() {
        return Err(Error::Input(format!("task {} has no training data", lc.task)));
    }
    let steps = data.len().div_ceil(lc.batch_size).max(lc.min_batches);
    let mut opt = OptimizerState::new(lc.lr, steps * lc.epochs);
    for &(id, s) in &lc.lr_scales {
        opt.set_lr_scale(id, s);
    }
    let mut batch_rng = seeds.stream(&format!("{}/batches", lc.phase));
    let mut aug_rng = seeds.stream(&format!("{}/augment", lc.phase));
    let mut dp_rng = seeds.stream(&format!("{}/drop-path", lc.phase));
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(lc.epochs);
    for epoch in 0..lc.epochs {
        let strategy = paths.begin_epoch(epoch);
        let mut total = 0.0;
        for step in 0..steps {
            if order.len() < lc.batch_size {
                let mut fresh: Vec<usize> = (0..data.len()).collect();
                fresh.shuffle(&mut batch_rng);
                order.extend(fresh);
            }
            let idx: Vec<usize> = order.drain(..lc.batch_size.min(order.len())).collect();
            let batch = augment_batch(&data.subset(&idx), lc.augment, &mut aug_rng);
            let (images, labels) = batch.to_batch();
            let path = paths.next_path()?;
            let mut tape = Tape::new();
            let mut dp = DropPath { rate: lc.drop_path, rng: &mut dp_rng };
            let dp = if lc.drop_path > 0.0 { Some(&mut dp) } else { None };
            let f = model.forward(&mut tape, store, &path, &images, dp)?;
            let loss = tape.cross_entropy_smoothed(f.logits, &labels, lc.smoothing)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "task {} {} epoch {epoch} step {step}: loss is {value}",
                    lc.task, lc.phase
                )));
            }
            let grads = tape.backward(loss)?;
            on_step(store, &path, &grads);
            adam_step(store, &grads, &mut opt, lc.precision)?;
            total += value;
        }
        log.push(LogRecord::epoch(lc.task, &lc.phase, epoch, strategy, total / steps as f64));
    }
    Ok(log)
}

/// SPOS supernet training with plain adapters and no drop-path.
#[allow(clippy::too_many_arguments)]
pub fn train_supernet(
    store: &mut ParamStore,
    model: &PathModel<'_>,
    table: Option<&SimilarityTable>,
    data: &Samples,
    sampler: &SamplerConfig,
    cfg: &SearchConfig,
    lr: f64,
    extra: &LoopExtras,
    seeds: &Seeds,
) -> Result<Vec<LogRecord>> {
    let supernet = model
        .supernet
        .ok_or_else(|| Error::Input("supernet training needs a supernet".into()))?;
    if supernet.adapter_mode != AdapterMode::Plain {
        return Err(Error::Input("supernet adapters must be plain".into()));
    }
    let mut lc = LoopConfig::from_search(supernet.task, "supernet", cfg.supernet_epochs, lr, cfg, extra.precision);
    lc.augment = extra.augment;
    lc.lr_scales = extra.lr_scales.clone();
    let mut source = SupernetSampler::new(supernet.task, &supernet.candidates, table, sampler, seeds);
    train_loop(store, model, data, &lc, seeds, &mut source, |_, _, _| {})
}

/// Settings shared by the supernet and finetune loops.
#[derive(Debug, Clone, Default)]
pub struct LoopExtras {
    pub precision: Precision,
    pub augment: AugmentPolicy,
    pub lr_scales: Vec<(ParamId, f64)>,
}

/// Top-1 accuracy of a path; no parameter changes.
pub fn evaluate_candidate(store: &ParamStore, model: &PathModel<'_>, path: &PathSpec, data: &Samples, chunk: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Input("fitness needs validation data".into()));
    }
    let logits = model.logits(store, path, data, chunk)?;
    Ok(accuracy(&logits, &data.labels))
}

/// Index of the largest logit per row; ties go to the lowest class.
pub fn predictions(logits: &crate::numerics::Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
        })
        .collect()
}

pub fn accuracy(logits: &crate::numerics::Tensor, labels: &[usize]) -> f64 {
    let p = predictions(logits);
    p.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub path: PathSpec,
    pub fitness: f64,
    pub age: usize,
    pub params: usize,
}

/// Fitness, then fewer added parameters, then fewer departures from Reuse,
/// then age, then op order.
fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.fitness
        .total_cmp(&a.fitness)
        .then(a.params.cmp(&b.params))
        .then(a.path.count(|o| !o.is_reuse()).cmp(&b.path.count(|o| !o.is_reuse())))
        .then(a.age.cmp(&b.age))
        .then(a.path.ops.cmp(&b.path.ops))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub generation: usize,
    pub best: f64,
    pub mean: f64,
    pub best_ever: f64,
}

#[derive(Debug, Clone)]
pub struct Evolution {
    pub best: Candidate,
    pub history: Vec<GenerationStats>,
    pub population: Vec<Candidate>,
    pub evaluations: usize,
}

/// Draws the initial population: each member is uniform with probability
/// `epsilon2`, hierarchical otherwise. Duplicates are redrawn up to ten times.
pub fn initial_population(
    task: usize,
    candidates: &[Vec<GrowOp>],
    table: Option<&SimilarityTable>,
    sampler: &SamplerConfig,
    size: usize,
    rng: &mut StreamRng,
) -> Result<Vec<PathSpec>> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(size);
    for _ in 0..size {
        let mut path = None;
        for _ in 0..=10 {
            let mode = if !sampler.hierarchical || table.is_none() || rng.random::<f64>() < sampler.epsilon2 {
                Strategy::Uniform
            } else {
                Strategy::Hierarchical
            };
            let p = sample_path(mode, task, candidates, table, rng)?;
            let fresh = !seen.contains(&p.ops);
            path = Some(p);
            if fresh {
                break;
            }
        }
        let p = path.expect("at least one draw");
        seen.insert(p.ops.clone());
        out.push(p);
    }
    Ok(out)
}

/// Evolutionary search. Each generation adds `n_mutants` mutants and
/// `n_crossover` crossovers of parents drawn from the top `crossover_pool`,
/// then keeps the best `keep` distinct paths. Fitness is computed once per
/// distinct path.
pub fn evolve(
    initial: Vec<PathSpec>,
    candidates: &[Vec<GrowOp>],
    cfg: &SearchConfig,
    rng: &mut StreamRng,
    params_of: impl Fn(&PathSpec) -> usize,
    mut fitness: impl FnMut(&PathSpec) -> Result<f64>,
) -> Result<Evolution> {
    if initial.is_empty() {
        return Err(Error::Input("evolution needs an initial population".into()));
    }
    let mut memo: BTreeMap<Vec<GrowOp>, f64> = BTreeMap::new();
    let mut score = |p: &PathSpec, memo: &mut BTreeMap<Vec<GrowOp>, f64>| -> Result<f64> {
        if let Some(&f) = memo.get(&p.ops) {
            return Ok(f);
        }
        let f = fitness(p)?;
        memo.insert(p.ops.clone(), f);
        Ok(f)
    };
    let mut population = Vec::new();
    let mut seen = HashSet::new();
    for p in initial {
        if seen.insert(p.ops.clone()) {
            let f = score(&p, &mut memo)?;
            population.push(Candidate { params: params_of(&p), path: p, fitness: f, age: 0 });
        }
    }
    population.sort_by(rank);
    population.truncate(cfg.keep);
    let mut best = population[0].clone();
    let stats = |g: usize, pop: &[Candidate], best: &Candidate| GenerationStats {
        generation: g,
        best: pop[0].fitness,
        mean: pop.iter().map(|c| c.fitness).sum::<f64>() / pop.len() as f64,
        best_ever: best.fitness,
    };
    let mut history = vec![stats(0, &population, &best)];
    for gen in 1..=cfg.evo_generations {
        let pool = &population[..cfg.crossover_pool.min(population.len())];
        let mut children = Vec::with_capacity(cfg.n_mutants + cfg.n_crossover);
        for _ in 0..cfg.n_mutants {
            let parent = &pool[rng.random_range(0..pool.len())].path;
            let ops = parent
                .ops
                .iter()
                .zip(candidates)
                .map(|(op, cands)| {
                    if cands.len() > 1 && rng.random::<f64>() < cfg.mutation_prob {
                        let others: Vec<GrowOp> = cands.iter().copied().filter(|c| c != op).collect();
                        others[rng.random_range(0..others.len())]
                    } else {
                        *op
                    }
                })
                .collect();
            children.push(PathSpec { task: parent.task, ops });
        }
        for _ in 0..cfg.n_crossover {
            let a = &pool[rng.random_range(0..pool.len())].path;
            let b = &pool[rng.random_range(0..pool.len())].path;
            let ops = a.ops.iter().zip(&b.ops).map(|(x, y)| if rng.random::<bool>() { *x } else { *y }).collect();
            children.push(PathSpec { task: a.task, ops });
        }
        for child in children {
            if seen.insert(child.ops.clone()) {
                let f = score(&child, &mut memo)?;
                population.push(Candidate { params: params_of(&child), path: child, fitness: f, age: gen });
            }
        }
        population.sort_by(rank);
        population.truncate(cfg.keep);
        seen = population.iter().map(|c| c.path.ops.clone()).collect();
        if rank(&population[0], &best) == Ordering::Less {
            best = population[0].clone();
        }
        history.push(stats(gen, &population, &best));
    }
    Ok(Evolution { best, history, population, evaluations: memo.len() })
}

/// Log records for an evolution history.
pub fn evolution_log(task: usize, evo: &Evolution) -> Vec<LogRecord> {
    evo.history
        .iter()
        .map(|g| LogRecord {
            task,
            phase: "evolve".into(),
            epoch_or_gen: g.generation,
            strategy: None,
            loss: None,
            fitness_best: Some(g.best_ever),
            fitness_mean: Some(g.mean),
            params_added: None,
        })
        .collect()
}

/// Retrains the selected path from scratch: fresh New/Adapt weights from a
/// new stream, residual adapters, a reinitialized head, drop-path. The
/// supernet field of `base` is ignored.
#[allow(clippy::too_many_arguments)]
pub fn finetune_target(
    store: &mut ParamStore,
    supernet: &mut Supernet,
    base: &PathModel<'_>,
    path: &PathSpec,
    data: &Samples,
    cfg: &SearchConfig,
    extra: &LoopExtras,
    seeds: &Seeds,
) -> Result<Vec<LogRecord>> {
    supernet.reinit_path(store, path, &seeds.child("finetune"));
    supernet.adapter_mode = AdapterMode::Residual;
    let model = PathModel { supernet: Some(supernet), ..*base };
    model.head.reinit(store, &mut seeds.stream("finetune/head"));
    if extra.precision == Precision::F32 {
        store.round_to_f32(&supernet.path_params(path));
        store.round_to_f32(&model.head.ids());
    }
    let mut lc = LoopConfig::from_search(supernet.task, "finetune", cfg.finetune_epochs, cfg.finetune_lr, cfg, extra.precision);
    lc.drop_path = cfg.drop_path;
    lc.min_batches = cfg.finetune_batches_min;
    lc.augment = extra.augment;
    lc.lr_scales = extra.lr_scales.clone();
    train_loop(store, &model, data, &lc, seeds, &mut FixedPath(path.clone()), |_, _, _| {})
}

/// Trainable parameters a path's forward pass can update.
pub fn trainable_on_path(store: &ParamStore, supernet: &Supernet, path: &PathSpec, head: &LinearParams, token: Option<ParamId>) -> Vec<ParamId> {
    let mut ids = supernet.path_params(path);
    ids.extend(head.ids());
    ids.extend(token);
    ids.retain(|&id| store.get(id).trainable);
    ids.sort();
    ids.dedup();
    ids
}
