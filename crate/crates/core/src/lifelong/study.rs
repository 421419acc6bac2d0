//! Finetuning a fixed component set of the first-task model, either
//! pairwise per task (transfer) or continually across the stream
//! (forgetting).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{average_forgetting, AccuracyMatrix, Learner};
use crate::error::{Error, Result};
use crate::experts::{PathModel, PathSpec};
use crate::nas::{evaluate_candidate, train_loop, FixedPath, LoopConfig};
use crate::numerics::{ParamId, ParamStore, Precision, Seeds};
use crate::taskdata::TaskDataset;
use crate::vit::LinearParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Component {
    Ln1,
    Ln2,
    Query,
    Key,
    Value,
    Proj,
    FfnUp,
    FfnDown,
    /// LN1, query, key, value and projection together.
    MhsaLn1,
    /// Nothing in the backbone; only the head trains.
    Head,
}

impl Component {
    pub const ALL: [Component; 10] = [
        Component::Ln1,
        Component::Ln2,
        Component::Query,
        Component::Key,
        Component::Value,
        Component::Proj,
        Component::FfnUp,
        Component::FfnDown,
        Component::MhsaLn1,
        Component::Head,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Ln1 => "ln1",
            Component::Ln2 => "ln2",
            Component::Query => "q",
            Component::Key => "k",
            Component::Value => "v",
            Component::Proj => "proj",
            Component::FfnUp => "ffn-up",
            Component::FfnDown => "ffn-down",
            Component::MhsaLn1 => "mhsa+ln1",
            Component::Head => "head",
        }
    }

    fn params(self, learner: &Learner) -> Result<Vec<ParamId>> {
        let mut ids = Vec::new();
        for (l, b) in learner.backbone.blocks.iter().enumerate() {
            let proj = learner.bank.entry(l, 0)?.param_ids();
            match self {
                Component::Ln1 => ids.extend(b.ln1.ids()),
                Component::Ln2 => ids.extend(b.ln2.ids()),
                Component::Query => ids.extend(b.query.ids()),
                Component::Key => ids.extend(b.key.ids()),
                Component::Value => ids.extend(b.value.ids()),
                Component::Proj => ids.extend(proj),
                Component::FfnUp => ids.extend(b.mlp_up.ids()),
                Component::FfnDown => ids.extend(b.mlp_down.ids()),
                Component::MhsaLn1 => {
                    ids.extend(b.ln1.ids());
                    ids.extend(b.query.ids());
                    ids.extend(b.key.ids());
                    ids.extend(b.value.ids());
                    ids.extend(proj);
                }
                Component::Head => {}
            }
        }
        Ok(ids)
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Component {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown component {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub components: Vec<Component>,
    /// Mean accuracy of pairwise first-task-to-task-n transfer.
    pub transfer: f64,
    /// Average forgetting of the continual run.
    pub forgetting: f64,
    pub matrix: AccuracyMatrix,
}

fn label(components: &[Component]) -> String {
    if components.is_empty() {
        return "none".into();
    }
    components.iter().map(|c| c.name()).collect::<Vec<_>>().join(",")
}

struct Tuner<'a> {
    learner: &'a Learner,
    trainable: Vec<ParamId>,
    seeds: Seeds,
}

impl Tuner<'_> {
    fn new<'a>(learner: &'a Learner, components: &[Component], mode: &str) -> Result<Tuner<'a>> {
        let mut trainable = Vec::new();
        for c in components {
            trainable.extend(c.params(learner)?);
        }
        trainable.sort();
        trainable.dedup();
        let seeds = learner.seeds().child(&format!("study/{}/{mode}", label(components)));
        Ok(Tuner { learner, trainable, seeds })
    }

    fn path(&self, task: usize) -> PathSpec {
        PathSpec::all_reuse(task, self.learner.config.model.depth, 0)
    }

    /// Finetunes the component set and a fresh head on `data` inside `store`.
    fn tune(&self, store: &mut ParamStore, task: usize, data: &TaskDataset) -> Result<LinearParams> {
        let cfg = &self.learner.config;
        let seeds = self.seeds.child(&format!("task{task}"));
        let head = LinearParams::init(
            store,
            &format!("study.head.{task}"),
            cfg.model.embed_dim,
            data.num_classes,
            &mut seeds.stream("head"),
            false,
        )?;
        if cfg.precision == Precision::F32 {
            store.round_to_f32(&head.ids());
        }
        store.freeze_all();
        for &id in self.trainable.iter().chain(&head.ids()) {
            store.set_trainable(id, true);
        }
        let model = self.model(head);
        let mut lc = LoopConfig::from_search(
            task,
            "study",
            cfg.search.finetune_epochs,
            cfg.search.finetune_lr,
            &cfg.search,
            cfg.precision,
        );
        lc.min_batches = cfg.search.finetune_batches_min;
        lc.augment = data.augment;
        train_loop(store, &model, &data.train, &lc, &seeds, &mut FixedPath(self.path(task)), |_, _, _| {})?;
        store.freeze_all();
        Ok(head)
    }

    fn model(&self, head: LinearParams) -> PathModel<'_> {
        PathModel { backbone: &self.learner.backbone, bank: &self.learner.bank, supernet: None, head, cls: None }
    }

    fn accuracy(&self, store: &ParamStore, head: LinearParams, task: usize, data: &TaskDataset) -> Result<f64> {
        let chunk = self.learner.config.search.eval_chunk;
        evaluate_candidate(store, &self.model(head), &self.path(task), &data.test, chunk)
    }
}

/// Mean over tasks `1..` of the accuracy reached by finetuning `components`
/// of the first-task model, with a fresh head, on that task alone.
/// `tasks[0]` is the learner's first task.
pub fn transfer_accuracy(learner: &Learner, tasks: &[TaskDataset], components: &[Component]) -> Result<f64> {
    if tasks.len() < 2 {
        return Err(Error::Input("transfer needs at least two tasks".into()));
    }
    let tuner = Tuner::new(learner, components, "transfer")?;
    let mut total = 0.0;
    for (n, data) in tasks.iter().enumerate().skip(1) {
        let mut store = learner.store.clone();
        let head = tuner.tune(&mut store, n, data)?;
        total += tuner.accuracy(&store, head, n, data)?;
    }
    Ok(total / (tasks.len() - 1) as f64)
}

/// Transfer accuracy plus the forgetting of finetuning `components`
/// continually through `tasks[1..]`, each task keeping its own head.
pub fn component_study(learner: &Learner, tasks: &[TaskDataset], components: &[Component]) -> Result<StudyResult> {
    let first = learner.record(0)?;
    let transfer = transfer_accuracy(learner, tasks, components)?;
    let tuner = Tuner::new(learner, components, "sequential")?;
    let mut store = learner.store.clone();
    let mut heads = vec![first.head];
    let mut matrix = AccuracyMatrix::default();
    matrix.push_row(vec![tuner.accuracy(&store, first.head, 0, &tasks[0])?])?;
    for (n, data) in tasks.iter().enumerate().skip(1) {
        heads.push(tuner.tune(&mut store, n, data)?);
        let row = (0..=n)
            .map(|i| tuner.accuracy(&store, heads[i], i, &tasks[i]))
            .collect::<Result<Vec<f64>>>()?;
        matrix.push_row(row)?;
    }
    Ok(StudyResult {
        components: components.to_vec(),
        transfer,
        forgetting: average_forgetting(&matrix, matrix.tasks()),
        matrix,
    })
}
