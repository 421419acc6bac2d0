//! The task stream: first-task training, the per-task growth pipeline,
//! task records, metrics, the component study and class-incremental
//! inference.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::experts::{
    closed_form_added, compute_mean_tokens, consolidate, construct_supernet, ExpertBank, GrowOp, PathModel, PathSpec,
};
use crate::nas::{
    evaluate_candidate, evolution_log, evolve, finetune_target, initial_population, train_loop, train_supernet,
    FixedPath, LogRecord, LoopConfig, LoopExtras, SearchConfig,
};
use crate::numerics::{hex, Checkpoint, ParamId, ParamStore, Precision, Seeds, Tape, Tensor};
use crate::sampling::{cosine, SamplerConfig, SimilarityTable};
use crate::taskdata::{Samples, TaskDataset};
use crate::vit::{Backbone, LinearParams, ViTConfig};

mod study;
pub use study::{component_study, transfer_accuracy, Component, StudyResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LifelongConfig {
    pub model: ViTConfig,
    pub search: SearchConfig,
    pub sampler: SamplerConfig,
    pub precision: Precision,
    pub base_epochs: usize,
    pub base_lr: f64,
    pub base_batches_min: usize,
    pub val_fraction: f64,
    pub task_token: bool,
    pub token_epochs: usize,
    pub token_lr: f64,
    pub token_finetune_lr: f64,
    pub token_supernet_lr: f64,
    pub probe_size: usize,
}

impl Default for LifelongConfig {
    fn default() -> Self {
        Self {
            model: ViTConfig::tiny(),
            search: SearchConfig::tiny(),
            sampler: SamplerConfig::default(),
            precision: Precision::F64,
            base_epochs: 20,
            base_lr: 1e-3,
            base_batches_min: 50,
            val_fraction: 0.1,
            task_token: false,
            token_epochs: 5,
            token_lr: 3e-3,
            token_finetune_lr: 1e-3,
            token_supernet_lr: 5e-4,
            probe_size: 256,
        }
    }
}

impl LifelongConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.search.validate()?;
        self.sampler.validate()?;
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Input(format!("val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        if self.probe_size == 0 {
            return Err(Error::Input("probe_size must be positive".into()));
        }
        Ok(())
    }
}

/// Everything needed to replay one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task: usize,
    pub name: String,
    pub num_classes: usize,
    pub path: PathSpec,
    pub head: LinearParams,
    pub token: Option<ParamId>,
    /// SHA-256 of the probe logits when the task finished.
    pub probe_hash: String,
    pub test_accuracy: f64,
    /// Backbone parameters the task added to the bank.
    pub params_added: usize,
    pub head_params: usize,
    pub token_params: usize,
}

/// `a[n][i]`: accuracy on task `i` after learning tasks `0..=n`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::Dimension(format!("row {} has {} entries", self.rows.len(), row.len())));
        }
        if row.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Input("accuracies must lie in [0, 1]".into()));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, n: usize, i: usize) -> f64 {
        self.rows[n][i]
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|a| format!("{a:.4}")).collect();
            out += &cells.join(" ");
            out.push('\n');
        }
        out
    }
}

/// Mean of the last row after `n` tasks.
pub fn average_accuracy(m: &AccuracyMatrix, n: usize) -> f64 {
    let row = &m.rows[n - 1];
    row.iter().sum::<f64>() / n as f64
}

/// `(1/(N-1)) Σ_{n<N} (max_{n<=j<=N-1} a[j][n] - a[N][n])`, 1-based, with
/// `N = n`. Zero for a single task.
pub fn average_forgetting(m: &AccuracyMatrix, n: usize) -> f64 {
    if n < 2 {
        return 0.0;
    }
    let last = &m.rows[n - 1];
    let mut total = 0.0;
    for i in 0..n - 1 {
        let peak = (i..n - 1).map(|j| m.rows[j][i]).fold(f64::NEG_INFINITY, f64::max);
        total += peak - last[i];
    }
    total / (n - 1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CiMode {
    Max,
    MinEntropy,
}

impl std::str::FromStr for CiMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(CiMode::Max),
            "min-entropy" | "min_entropy" => Ok(CiMode::MinEntropy),
            other => Err(Error::Input(format!("unknown class-incremental mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CiPrediction {
    pub task: usize,
    pub class: usize,
}

/// Persisted learner state besides the parameter payload.
#[derive(Serialize, Deserialize)]
struct LearnerMeta {
    seed: u64,
    config: LifelongConfig,
    backbone: Backbone,
    bank: ExpertBank,
    records: Vec<TaskRecord>,
    trunk_hash: String,
}

#[derive(Clone)]
pub struct Learner {
    pub config: LifelongConfig,
    pub seed: u64,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub bank: ExpertBank,
    pub records: Vec<TaskRecord>,
    /// Hash of the trunk taken when the first task finished.
    pub trunk_hash: String,
    /// Run log of everything learned in this process.
    pub log: Vec<LogRecord>,
    /// Similarity dumps, one block of lines per learned task.
    pub similarity: Vec<String>,
}

fn probe_hash(logits: &Tensor) -> String {
    let mut h = Sha256::new();
    for &s in logits.shape() {
        h.update((s as u64).to_le_bytes());
    }
    for v in logits.data() {
        h.update(v.to_le_bytes());
    }
    hex(&h.finalize())
}

impl Learner {
    pub fn seeds(&self) -> Seeds {
        Seeds::new(self.seed)
    }

    fn chunk(&self) -> usize {
        self.config.search.eval_chunk
    }

    fn depth(&self) -> usize {
        self.config.model.depth
    }

    /// Conventional training of the whole model on the first task; each
    /// block's projection becomes the first expert of its bank and the
    /// backbone is frozen from then on.
    pub fn learn_first_task(config: LifelongConfig, seed: u64, data: &TaskDataset) -> Result<Learner> {
        config.validate()?;
        check_geometry(&config.model, data)?;
        let seeds = Seeds::new(seed).child("task0");
        let d = config.model.embed_dim;
        let mut store = ParamStore::new();
        let (backbone, projections) = Backbone::init(config.model, &mut store, &seeds)?;
        let head = LinearParams::init(&mut store, "head.0", d, data.num_classes, &mut seeds.stream("head"), false)?;
        if config.precision == Precision::F32 {
            let ids: Vec<ParamId> = store.persistent().map(|(id, _)| id).collect();
            store.round_to_f32(&ids);
        }
        let draft = ExpertBank::from_base(&mut store, &projections, vec![vec![0.0; d]; config.model.depth])?;
        for p in &projections {
            for id in p.ids() {
                store.set_trainable(id, true);
            }
        }
        let model = PathModel { backbone: &backbone, bank: &draft, supernet: None, head, cls: None };
        let lc = LoopConfig {
            task: 0,
            phase: "base".into(),
            epochs: config.base_epochs,
            lr: config.base_lr,
            drop_path: config.model.drop_path_rate,
            smoothing: config.search.label_smoothing,
            batch_size: config.search.batch_size,
            min_batches: config.base_batches_min,
            augment: data.augment,
            precision: config.precision,
            lr_scales: Vec::new(),
        };
        let path = PathSpec::all_reuse(0, config.model.depth, 0);
        let log = train_loop(&mut store, &model, &data.train, &lc, &seeds, &mut FixedPath(path.clone()), |_, _, _| {})?;
        store.freeze_all();
        let mu = compute_mean_tokens(&store, &backbone, &draft, &data.train, None, config.search.eval_chunk)?;
        let bank = ExpertBank::from_base(&mut store, &projections, mu.into_iter().map(|mut b| b.swap_remove(0)).collect())?;
        let trunk_hash = store.content_hash(&backbone.ids());
        let params_added = store.count(&backbone.ids()) + store.count(&bank.param_ids());
        let mut learner = Learner {
            config,
            seed,
            store,
            backbone,
            bank,
            records: Vec::new(),
            trunk_hash,
            log,
            similarity: Vec::new(),
        };
        let head_params = learner.store.count(&head.ids());
        learner.finish_record(data, path, head, None, params_added, head_params)?;
        Ok(learner)
    }

    fn finish_record(
        &mut self,
        data: &TaskDataset,
        path: PathSpec,
        head: LinearParams,
        token: Option<ParamId>,
        params_added: usize,
        head_params: usize,
    ) -> Result<&TaskRecord> {
        let task = self.records.len();
        let token_params = token.map_or(0, |t| self.store.count(&[t]));
        let mut rec = TaskRecord {
            task,
            name: data.name.clone(),
            num_classes: data.num_classes,
            path,
            head,
            token,
            probe_hash: String::new(),
            test_accuracy: 0.0,
            params_added,
            head_params,
            token_params,
        };
        rec.test_accuracy = self.accuracy_with(&rec, &data.test)?;
        rec.probe_hash = self.probe_hash_with(&rec, &data.test)?;
        self.log.push(LogRecord {
            task,
            phase: "consolidate".into(),
            epoch_or_gen: 0,
            strategy: None,
            loss: None,
            fitness_best: None,
            fitness_mean: None,
            params_added: Some(params_added),
        });
        self.records.push(rec);
        Ok(self.records.last().expect("just pushed"))
    }

    pub fn model_for(&self, task: usize) -> Result<PathModel<'_>> {
        let rec = self.record(task)?;
        Ok(PathModel { backbone: &self.backbone, bank: &self.bank, supernet: None, head: rec.head, cls: rec.token })
    }

    pub fn record(&self, task: usize) -> Result<&TaskRecord> {
        self.records.get(task).ok_or_else(|| Error::Input(format!("task {task} has not been learned")))
    }

    fn model_with(&self, rec: &TaskRecord) -> PathModel<'_> {
        PathModel { backbone: &self.backbone, bank: &self.bank, supernet: None, head: rec.head, cls: rec.token }
    }

    fn accuracy_with(&self, rec: &TaskRecord, data: &Samples) -> Result<f64> {
        evaluate_candidate(&self.store, &self.model_with(rec), &rec.path, data, self.chunk())
    }

    fn probe_hash_with(&self, rec: &TaskRecord, test: &Samples) -> Result<String> {
        let probe = test.take(self.config.probe_size);
        Ok(probe_hash(&self.model_with(rec).logits(&self.store, &rec.path, &probe, self.chunk())?))
    }

    /// Test accuracy of a learned task on `data`.
    pub fn evaluate(&self, task: usize, data: &Samples) -> Result<f64> {
        self.accuracy_with(self.record(task)?, data)
    }

    /// Hash of the task's logits on the first `probe_size` samples of `test`.
    pub fn probe_hash(&self, task: usize, test: &Samples) -> Result<String> {
        self.probe_hash_with(self.record(task)?, test)
    }

    /// Checks the trunk and every consolidated bank entry against the hashes
    /// taken when they were frozen.
    pub fn verify_frozen(&self) -> Result<()> {
        if self.store.content_hash(&self.backbone.ids()) != self.trunk_hash {
            return Err(Error::Integrity("trunk parameters changed after the first task".into()));
        }
        self.bank.verify(&self.store)
    }

    fn train_token(&mut self, token: ParamId, data: &TaskDataset, lr: f64, phase: &str, seeds: &Seeds) -> Result<()> {
        let t = self.records.len();
        let d = self.config.model.embed_dim;
        let head = LinearParams::init(
            &mut self.store,
            &format!("task{t}.{phase}.head"),
            d,
            data.num_classes,
            &mut seeds.stream(&format!("{phase}/head")),
            true,
        )?;
        if self.config.precision == Precision::F32 {
            self.store.round_to_f32(&head.ids());
        }
        self.store.set_trainable(token, true);
        let model = PathModel { backbone: &self.backbone, bank: &self.bank, supernet: None, head, cls: Some(token) };
        let mut lc = LoopConfig::from_search(t, phase, self.config.token_epochs, lr, &self.config.search, self.config.precision);
        lc.augment = data.augment;
        let path = PathSpec::all_reuse(t, self.depth(), 0);
        let log = train_loop(&mut self.store, &model, &data.train, &lc, seeds, &mut FixedPath(path), |_, _, _| {})?;
        self.log.extend(log);
        Ok(())
    }

    /// A class token for the next task, trained with a temporary head on the
    /// frozen first-task model. Lives in scratch until consolidation.
    pub fn learn_task_token(&mut self, data: &TaskDataset) -> Result<ParamId> {
        let t = self.records.len();
        let seeds = self.seeds().child(&format!("task{t}"));
        let init = self.store.tensor(self.backbone.cls).clone();
        let token = self.store.add_scratch(&format!("task{t}.token"), init, true)?;
        self.train_token(token, data, self.config.token_lr, "token", &seeds)?;
        Ok(token)
    }

    /// The full growth pipeline for the next task: optional task token,
    /// supernet, similarity, supernet training, evolution, finetuning and
    /// consolidation.
    pub fn learn_task(&mut self, data: &TaskDataset) -> Result<&TaskRecord> {
        check_geometry(&self.config.model, data)?;
        if data.val.is_empty() {
            return Err(Error::Input(format!("task {} has no validation split", data.name)));
        }
        let t = self.records.len();
        if t == 0 {
            return Err(Error::Input("the first task must be learned with learn_first_task".into()));
        }
        let seeds = self.seeds().child(&format!("task{t}"));
        let cfg = self.config.clone();
        let d = cfg.model.embed_dim;
        let token = if cfg.task_token { Some(self.learn_task_token(data)?) } else { None };
        let mut supernet = construct_supernet(&self.bank, &mut self.store, t, &seeds)?;
        let head = LinearParams::init(&mut self.store, &format!("head.{t}"), d, data.num_classes, &mut seeds.stream("head"), true)?;
        if cfg.precision == Precision::F32 {
            self.store.round_to_f32(&supernet.all_fresh_params());
            self.store.round_to_f32(&head.ids());
        }

        let probed = compute_mean_tokens(&self.store, &self.backbone, &self.bank, &data.train, token, cfg.search.eval_chunk)?;
        let stored: Vec<Vec<&[f64]>> = self.bank.blocks.iter().map(|b| b.iter().map(|e| e.mean_token()).collect()).collect();
        let table = SimilarityTable::from_tokens(&probed, &stored)?;
        self.similarity.push(table.dump(t));

        let (lr, lr_scales) = match token {
            Some(tok) => (cfg.token_supernet_lr, vec![(tok, cfg.token_lr / cfg.token_supernet_lr)]),
            None => (cfg.search.supernet_lr, Vec::new()),
        };
        let extra = LoopExtras { precision: cfg.precision, augment: data.augment, lr_scales };
        let sizes: Vec<usize> = self.bank.blocks.iter().map(Vec::len).collect();
        let best = {
            let model = PathModel { backbone: &self.backbone, bank: &self.bank, supernet: Some(&supernet), head, cls: token };
            let log = train_supernet(&mut self.store, &model, Some(&table), &data.train, &cfg.sampler, &cfg.search, lr, &extra, &seeds)?;
            self.log.extend(log);
            let mut rng = seeds.stream("evolve");
            let init = initial_population(t, &supernet.candidates, Some(&table), &cfg.sampler, cfg.search.population, &mut rng)?;
            let store = &self.store;
            let evo = evolve(
                init,
                &supernet.candidates,
                &cfg.search,
                &mut rng,
                |p| closed_form_added(p, d, &sizes),
                |p| evaluate_candidate(store, &model, p, &data.val, cfg.search.eval_chunk),
            )?;
            self.log.extend(evolution_log(t, &evo));
            evo.best.path
        };

        if let Some(tok) = token {
            self.train_token(tok, data, cfg.token_finetune_lr, "token-finetune", &seeds)?;
            self.store.set_trainable(tok, false);
        }
        let extra = LoopExtras { precision: cfg.precision, augment: data.augment, lr_scales: Vec::new() };
        let base = PathModel { backbone: &self.backbone, bank: &self.bank, supernet: None, head, cls: token };
        let log = finetune_target(&mut self.store, &mut supernet, &base, &best, &data.train, &cfg.search, &extra, &seeds)?;
        self.log.extend(log);

        let model = PathModel { supernet: Some(&supernet), ..base };
        let mus = model.path_mean_tokens(&self.store, &best, &data.train, cfg.search.eval_chunk)?;
        let c = consolidate(&mut self.store, &mut self.bank, &supernet, &best, &mus)?;
        let head = LinearParams { w: self.store.promote(head.w)?, b: self.store.promote(head.b)? };
        let token = token.map(|tok| self.store.promote(tok)).transpose()?;
        for id in head.ids().into_iter().chain(token) {
            self.store.set_trainable(id, false);
        }
        self.store.clear_scratch();
        let head_params = self.store.count(&head.ids());
        self.finish_record(data, c.path, head, token, c.params_added, head_params)
    }

    /// Backbone parameters added over tasks after the first.
    pub fn params_added_after_first(&self) -> usize {
        self.records.iter().skip(1).map(|r| r.params_added).sum()
    }

    /// Task-id and class prediction without task labels. `Max` picks the
    /// task whose path's class tokens best match its stored mean tokens at
    /// some block; `MinEntropy` picks the task whose head is most confident.
    /// Ties go to the lowest task id.
    pub fn predict_class_incremental(&self, x: &Samples, mode: CiMode) -> Result<Vec<CiPrediction>> {
        if self.records.is_empty() {
            return Err(Error::Input("no task has been learned".into()));
        }
        let n = x.len();
        let mut best: Vec<(f64, CiPrediction)> = vec![(f64::NEG_INFINITY, CiPrediction { task: 0, class: 0 }); n];
        for rec in &self.records {
            let model = self.model_with(rec);
            let mut offset = 0;
            for (images, _) in x.chunks(self.chunk()) {
                let mut tape = Tape::new();
                let f = model.forward(&mut tape, &self.store, &rec.path, &images, None)?;
                let b = images.shape()[0];
                let mut indicator = vec![f64::NEG_INFINITY; b];
                if mode == CiMode::Max {
                    for (l, (op, out)) in rec.path.ops.iter().zip(&f.slot_outputs).enumerate() {
                        let (Some(out), Some(entry)) = (out, op_entry(op)) else { continue };
                        let mu = self.bank.entry(l, entry)?.mean_token();
                        let cls = tape.first_tokens(*out)?;
                        let cls = tape.value(cls);
                        for (i, ind) in indicator.iter_mut().enumerate() {
                            *ind = ind.max(cosine(mu, cls.row(i)));
                        }
                    }
                }
                let logits = tape.value(f.logits);
                for i in 0..b {
                    let row = logits.row(i);
                    let class = row.iter().enumerate().fold(0, |k, (j, &v)| if v > row[k] { j } else { k });
                    let score = match mode {
                        CiMode::Max => indicator[i],
                        CiMode::MinEntropy => -entropy(row),
                    };
                    if score > best[offset + i].0 {
                        best[offset + i] = (score, CiPrediction { task: rec.task, class });
                    }
                }
                offset += b;
            }
        }
        Ok(best.into_iter().map(|(_, p)| p).collect())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        if self.store.scratch_len() != 0 {
            return Err(Error::Integrity("cannot checkpoint with unconsolidated parameters".into()));
        }
        let meta = LearnerMeta {
            seed: self.seed,
            config: self.config.clone(),
            backbone: self.backbone.clone(),
            bank: self.bank.clone(),
            records: self.records.clone(),
            trunk_hash: self.trunk_hash.clone(),
        };
        let metadata = serde_json::to_string(&meta).map_err(|e| Error::Format(e.to_string()))?;
        Ok(Checkpoint::from_store(&self.store, self.config.precision, metadata))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Learner> {
        let meta: LearnerMeta =
            serde_json::from_str(&ckpt.metadata).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        let store = ckpt.to_store()?;
        let learner = Learner {
            config: meta.config,
            seed: meta.seed,
            store,
            backbone: meta.backbone,
            bank: meta.bank,
            records: meta.records,
            trunk_hash: meta.trunk_hash,
            log: Vec::new(),
            similarity: Vec::new(),
        };
        learner.verify_frozen()?;
        Ok(learner)
    }
}

fn op_entry(op: &GrowOp) -> Option<usize> {
    match *op {
        GrowOp::Skip => None,
        GrowOp::Reuse { target } => Some(target),
        GrowOp::Adapt { adapter, .. } => Some(adapter),
        GrowOp::New { expert } => Some(expert),
    }
}

/// Shannon entropy of the softmax of a logit row.
pub fn entropy(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
    logits
        .iter()
        .map(|v| {
            let p = (v - m).exp() / z;
            if p > 0.0 {
                -p * p.ln()
            } else {
                0.0
            }
        })
        .sum()
}

fn check_geometry(model: &ViTConfig, data: &TaskDataset) -> Result<()> {
    let g = data.geometry;
    if g.channels != model.channels || g.height != model.image_size || g.width != model.image_size {
        return Err(Error::Input(format!(
            "task {} has geometry {g}, model expects {}x{}x{}",
            data.name, model.channels, model.image_size, model.image_size
        )));
    }
    data.validate()
}

/// Outcome of learning a whole stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamReport {
    pub matrix: AccuracyMatrix,
    /// Probe hashes at each task's completion.
    pub snapshots: Vec<String>,
    /// `(after_task, task)` pairs whose probe logits no longer matched.
    pub replay_mismatches: Vec<(usize, usize)>,
    pub params_added: Vec<usize>,
}

impl StreamReport {
    pub fn average_accuracy(&self) -> f64 {
        average_accuracy(&self.matrix, self.matrix.tasks())
    }

    pub fn average_forgetting(&self) -> f64 {
        average_forgetting(&self.matrix, self.matrix.tasks())
    }
}

/// Learns `tasks` in order, filling the accuracy matrix and re-checking
/// every earlier task's probe logits after each new task.
pub fn run_stream(
    config: LifelongConfig,
    seed: u64,
    tasks: &[TaskDataset],
    after_task: impl FnMut(&Learner) -> Result<()>,
) -> Result<(Learner, StreamReport)> {
    let first = tasks.first().ok_or_else(|| Error::Input("empty task stream".into()))?;
    let learner = Learner::learn_first_task(config, seed, first)?;
    continue_stream(learner, tasks, after_task)
}

/// Like [`run_stream`] for a learner that already knows a prefix of
/// `tasks`; the remaining tasks are learned in order.
pub fn continue_stream(
    mut learner: Learner,
    tasks: &[TaskDataset],
    mut after_task: impl FnMut(&Learner) -> Result<()>,
) -> Result<(Learner, StreamReport)> {
    let known = learner.records.len();
    if known == 0 || known > tasks.len() {
        return Err(Error::Input(format!("learner knows {known} tasks of a {}-task stream", tasks.len())));
    }
    let mut report = StreamReport {
        matrix: AccuracyMatrix::default(),
        snapshots: Vec::new(),
        replay_mismatches: Vec::new(),
        params_added: Vec::new(),
    };
    for (n, data) in tasks.iter().enumerate() {
        if n >= known {
            learner.learn_task(data)?;
        }
        let rec = learner.record(n)?;
        if rec.name != data.name {
            return Err(Error::Input(format!("task {n} is {:?} in the learner but {:?} in the stream", rec.name, data.name)));
        }
        report.snapshots.push(rec.probe_hash.clone());
        report.params_added.push(rec.params_added);
        let mut row = Vec::with_capacity(n + 1);
        for (i, prev) in tasks.iter().enumerate().take(n + 1) {
            row.push(learner.evaluate(i, &prev.test)?);
            if learner.probe_hash(i, &prev.test)? != report.snapshots[i] {
                report.replay_mismatches.push((n, i));
            }
        }
        report.matrix.push_row(row)?;
        learner.verify_frozen()?;
        if n + 1 >= known {
            after_task(&learner)?;
        }
    }
    Ok((learner, report))
}
