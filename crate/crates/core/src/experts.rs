//! Per-block expert banks, the four growing operations and path resolution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Seeds, Tape, Tensor, Var};
use crate::taskdata::Samples;
use crate::vit::{self, Backbone, LinearParams, ProjectionSlot};

pub mod grid;

/// Index of an entry within one block's bank.
pub type TargetId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterMode {
    Plain,
    Residual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterParams {
    pub down: LinearParams,
    pub up: LinearParams,
}

impl AdapterParams {
    /// Down-projection drawn from the init distribution, up-projection zeroed.
    pub fn init(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut crate::numerics::StreamRng) -> Result<Self> {
        Ok(Self {
            down: LinearParams::init(store, &format!("{name}.down"), dim, hidden, rng, true)?,
            up: LinearParams::zeros(store, &format!("{name}.up"), hidden, dim, true)?,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.down.ids().to_vec();
        v.extend(self.up.ids());
        v
    }

    pub fn reinit(&self, store: &mut ParamStore, rng: &mut crate::numerics::StreamRng) {
        self.down.reinit(store, rng);
        for id in self.up.ids() {
            let shape = store.tensor(id).shape().to_vec();
            store.get_mut(id).tensor = Tensor::zeros(&shape);
        }
    }

    /// `up(gelu(down(v)))`, plus `v` in residual mode.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, v: Var, mode: AdapterMode) -> Result<Var> {
        let h = self.down.forward(tape, store, v)?;
        let h = tape.gelu(h);
        let a = self.up.forward(tape, store, h)?;
        match mode {
            AdapterMode::Plain => Ok(a),
            AdapterMode::Residual => tape.add(v, a),
        }
    }
}

/// Adapter bottleneck width for embedding width `d`.
pub fn adapter_hidden(d: usize) -> usize {
    (d / 4).max(1)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Expert {
    pub proj: LinearParams,
    pub mean_token: Vec<f64>,
    pub owner_task: usize,
    pub adapter_children: Vec<TargetId>,
    pub content_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adapter {
    pub params: AdapterParams,
    pub mode: AdapterMode,
    pub mean_token: Vec<f64>,
    pub owner_task: usize,
    pub parent: TargetId,
    pub adapter_children: Vec<TargetId>,
    pub content_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BankEntry {
    Expert(Expert),
    Adapter(Adapter),
}

impl BankEntry {
    pub fn mean_token(&self) -> &[f64] {
        match self {
            BankEntry::Expert(e) => &e.mean_token,
            BankEntry::Adapter(a) => &a.mean_token,
        }
    }

    pub fn owner_task(&self) -> usize {
        match self {
            BankEntry::Expert(e) => e.owner_task,
            BankEntry::Adapter(a) => a.owner_task,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            BankEntry::Expert(e) => e.proj.ids().to_vec(),
            BankEntry::Adapter(a) => a.params.ids(),
        }
    }

    fn content_hash(&self) -> &str {
        match self {
            BankEntry::Expert(e) => &e.content_hash,
            BankEntry::Adapter(a) => &a.content_hash,
        }
    }

    fn children_mut(&mut self) -> &mut Vec<TargetId> {
        match self {
            BankEntry::Expert(e) => &mut e.adapter_children,
            BankEntry::Adapter(a) => &mut a.adapter_children,
        }
    }
}

/// The long-term memory: one growing list of experts and adapters per block.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ExpertBank {
    pub blocks: Vec<Vec<BankEntry>>,
}

impl ExpertBank {
    /// One expert per block built from the first task's projections.
    pub fn from_base(store: &mut ParamStore, projections: &[LinearParams], mean_tokens: Vec<Vec<f64>>) -> Result<Self> {
        if projections.len() != mean_tokens.len() {
            return Err(Error::Dimension("one mean token per base projection".into()));
        }
        let mut blocks = Vec::with_capacity(projections.len());
        for (proj, mu) in projections.iter().zip(mean_tokens) {
            for id in proj.ids() {
                store.set_trainable(id, false);
            }
            let content_hash = store.content_hash(&proj.ids());
            blocks.push(vec![BankEntry::Expert(Expert {
                proj: *proj,
                mean_token: mu,
                owner_task: 0,
                adapter_children: Vec::new(),
                content_hash,
            })]);
        }
        Ok(Self { blocks })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn len(&self, block: usize) -> usize {
        self.blocks[block].len()
    }

    pub fn entry(&self, block: usize, target: TargetId) -> Result<&BankEntry> {
        self.blocks
            .get(block)
            .and_then(|b| b.get(target))
            .ok_or_else(|| Error::Integrity(format!("no bank entry {target} at block {block}")))
    }

    /// Stages that realize `target` on top of the attention output.
    fn chain(&self, block: usize, target: TargetId) -> Result<Vec<Stage>> {
        let mut stages = Vec::new();
        let mut cur = target;
        loop {
            match self.entry(block, cur)? {
                BankEntry::Expert(e) => {
                    stages.push(Stage::Proj(e.proj));
                    break;
                }
                BankEntry::Adapter(a) => {
                    if a.parent >= cur {
                        return Err(Error::Integrity(format!("adapter {cur} at block {block} has parent {}", a.parent)));
                    }
                    stages.push(Stage::Adapter(a.params, a.mode));
                    cur = a.parent;
                }
            }
        }
        stages.reverse();
        Ok(stages)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.blocks.iter().flatten().flat_map(BankEntry::param_ids).collect()
    }

    /// Checks every entry against the hash recorded at consolidation.
    pub fn verify(&self, store: &ParamStore) -> Result<()> {
        for (l, block) in self.blocks.iter().enumerate() {
            for (k, e) in block.iter().enumerate() {
                if store.content_hash(&e.param_ids()) != e.content_hash() {
                    return Err(Error::Integrity(format!("bank entry {k} at block {l} changed after consolidation")));
                }
            }
        }
        Ok(())
    }
}

/// One growing operation at one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum GrowOp {
    Skip,
    Reuse { target: TargetId },
    Adapt { target: TargetId, adapter: TargetId },
    New { expert: TargetId },
}

impl GrowOp {
    pub fn is_reuse(&self) -> bool {
        matches!(self, GrowOp::Reuse { .. })
    }
    pub fn is_new(&self) -> bool {
        matches!(self, GrowOp::New { .. })
    }
}

/// A single-path subnetwork: one operation per block.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PathSpec {
    pub task: usize,
    pub ops: Vec<GrowOp>,
}

impl PathSpec {
    pub fn all_reuse(task: usize, depth: usize, target: TargetId) -> Self {
        Self { task, ops: vec![GrowOp::Reuse { target }; depth] }
    }

    pub fn count(&self, pred: impl Fn(&GrowOp) -> bool) -> usize {
        self.ops.iter().filter(|op| pred(op)).count()
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Stage {
    Proj(LinearParams),
    Adapter(AdapterParams, AdapterMode),
}

/// A resolved projection slot.
#[derive(Debug, Clone)]
pub enum Slot {
    Skip,
    Chain(Vec<Stage>),
}

impl ProjectionSlot for Slot {
    fn apply(&self, tape: &mut Tape, store: &ParamStore, u: Var) -> Result<Option<Var>> {
        match self {
            Slot::Skip => Ok(None),
            Slot::Chain(stages) => {
                let mut v = u;
                for s in stages {
                    v = match s {
                        Stage::Proj(p) => p.forward(tape, store, v)?,
                        Stage::Adapter(a, mode) => a.forward(tape, store, v, *mode)?,
                    };
                }
                Ok(Some(v))
            }
        }
    }
}

/// Fresh, not yet consolidated parameters of one block in a supernet.
#[derive(Debug, Clone)]
pub struct FreshBlock {
    pub new_proj: LinearParams,
    /// One adapter per existing bank entry, indexed by target.
    pub adapters: Vec<AdapterParams>,
}

/// Candidate operations and fresh parameters for one new task.
#[derive(Debug, Clone)]
pub struct Supernet {
    pub task: usize,
    /// Per block: `[Reuse(e), Adapt(e)] for e in bank` then `New`, `Skip`.
    pub candidates: Vec<Vec<GrowOp>>,
    pub fresh: Vec<FreshBlock>,
    /// Mode fresh adapters run in.
    pub adapter_mode: AdapterMode,
}

impl Supernet {
    pub fn search_space_size(&self) -> u128 {
        self.candidates.iter().map(|c| c.len() as u128).product()
    }

    /// Trainable parameters the path touches (fresh New/Adapt only).
    pub fn path_params(&self, path: &PathSpec) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for (l, op) in path.ops.iter().enumerate() {
            match *op {
                GrowOp::New { expert } if expert >= self.fresh_base(l) => ids.extend(self.fresh[l].new_proj.ids()),
                GrowOp::Adapt { target, adapter } if adapter >= self.fresh_base(l) => {
                    ids.extend(self.fresh[l].adapters[target].ids())
                }
                _ => {}
            }
        }
        ids
    }

    /// Id a fresh entry at block `l` would receive on consolidation.
    pub fn fresh_base(&self, l: usize) -> TargetId {
        self.fresh[l].adapters.len()
    }

    pub fn all_fresh_params(&self) -> Vec<ParamId> {
        self.fresh
            .iter()
            .flat_map(|f| f.new_proj.ids().into_iter().chain(f.adapters.iter().flat_map(AdapterParams::ids)))
            .collect()
    }

    /// Re-draws every fresh parameter the path uses.
    pub fn reinit_path(&self, store: &mut ParamStore, path: &PathSpec, seeds: &Seeds) {
        for (l, op) in path.ops.iter().enumerate() {
            let mut rng = seeds.stream(&format!("reinit/block{l}"));
            match *op {
                GrowOp::New { expert } if expert >= self.fresh_base(l) => self.fresh[l].new_proj.reinit(store, &mut rng),
                GrowOp::Adapt { target, adapter } if adapter >= self.fresh_base(l) => {
                    self.fresh[l].adapters[target].reinit(store, &mut rng)
                }
                _ => {}
            }
        }
    }
}

/// Builds the search space for `task` over the current bank. Fresh
/// parameters live in the scratch region of `store` and are trainable; every
/// existing parameter stays frozen.
pub fn construct_supernet(bank: &ExpertBank, store: &mut ParamStore, task: usize, seeds: &Seeds) -> Result<Supernet> {
    let mut candidates = Vec::with_capacity(bank.depth());
    let mut fresh = Vec::with_capacity(bank.depth());
    for (l, block) in bank.blocks.iter().enumerate() {
        if block.is_empty() {
            return Err(Error::Integrity(format!("block {l} has an empty bank")));
        }
        let d = store.tensor(bank.chain(l, 0).and_then(|c| match c[0] {
            Stage::Proj(p) => Ok(p.w),
            Stage::Adapter(..) => Err(Error::Integrity("chain must start at an expert".into())),
        })?).shape()[0];
        let fresh_id = block.len();
        let mut rng = seeds.stream(&format!("supernet/task{task}/block{l}"));
        let new_proj = LinearParams::init(store, &format!("task{task}.block{l}.new.proj"), d, d, &mut rng, true)?;
        let mut adapters = Vec::with_capacity(block.len());
        let mut ops = Vec::with_capacity(2 * block.len() + 2);
        for e in 0..block.len() {
            adapters.push(AdapterParams::init(store, &format!("task{task}.block{l}.adapt{e}"), d, adapter_hidden(d), &mut rng)?);
            ops.push(GrowOp::Reuse { target: e });
            ops.push(GrowOp::Adapt { target: e, adapter: fresh_id });
        }
        ops.push(GrowOp::New { expert: fresh_id });
        ops.push(GrowOp::Skip);
        candidates.push(ops);
        fresh.push(FreshBlock { new_proj, adapters });
    }
    Ok(Supernet { task, candidates, fresh, adapter_mode: AdapterMode::Plain })
}

/// Resolves one operation at block `l` into a slot.
pub fn resolve_op(bank: &ExpertBank, supernet: Option<&Supernet>, l: usize, op: GrowOp) -> Result<Slot> {
    let n = bank.blocks.get(l).map(Vec::len).ok_or_else(|| Error::Integrity(format!("no block {l}")))?;
    let dangling = || Error::Integrity(format!("operation {op:?} at block {l} refers to nothing"));
    match op {
        GrowOp::Skip => Ok(Slot::Skip),
        GrowOp::Reuse { target } => Ok(Slot::Chain(bank.chain(l, target)?)),
        GrowOp::New { expert } if expert < n => Ok(Slot::Chain(bank.chain(l, expert)?)),
        GrowOp::New { expert } => {
            let sn = supernet.filter(|s| expert == s.fresh_base(l)).ok_or_else(dangling)?;
            Ok(Slot::Chain(vec![Stage::Proj(sn.fresh[l].new_proj)]))
        }
        GrowOp::Adapt { adapter, .. } if adapter < n => {
            let chain = bank.chain(l, adapter)?;
            Ok(Slot::Chain(chain))
        }
        GrowOp::Adapt { target, adapter } => {
            let sn = supernet.filter(|s| adapter == s.fresh_base(l)).ok_or_else(dangling)?;
            let params = *sn.fresh[l].adapters.get(target).ok_or_else(dangling)?;
            let mut chain = bank.chain(l, target)?;
            chain.push(Stage::Adapter(params, sn.adapter_mode));
            Ok(Slot::Chain(chain))
        }
    }
}

/// Applies a growing operation to the multi-head output `u`; `None` for Skip.
pub fn apply_op(
    tape: &mut Tape,
    store: &ParamStore,
    bank: &ExpertBank,
    supernet: Option<&Supernet>,
    l: usize,
    op: GrowOp,
    u: Var,
) -> Result<Option<Var>> {
    resolve_op(bank, supernet, l, op)?.apply(tape, store, u)
}

pub fn resolve_path(bank: &ExpertBank, supernet: Option<&Supernet>, path: &PathSpec) -> Result<Vec<Slot>> {
    if path.ops.len() != bank.depth() {
        return Err(Error::Integrity(format!("path of length {} for depth {}", path.ops.len(), bank.depth())));
    }
    path.ops.iter().enumerate().map(|(l, op)| resolve_op(bank, supernet, l, *op)).collect()
}

/// Everything needed to run one task's network.
#[derive(Clone, Copy)]
pub struct PathModel<'a> {
    pub backbone: &'a Backbone,
    pub bank: &'a ExpertBank,
    pub supernet: Option<&'a Supernet>,
    pub head: LinearParams,
    pub cls: Option<ParamId>,
}

pub struct PathForward {
    pub logits: Var,
    pub slot_outputs: Vec<Option<Var>>,
}

impl PathModel<'_> {
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        path: &PathSpec,
        images: &Tensor,
        drop_path: Option<&mut vit::DropPath<'_>>,
    ) -> Result<PathForward> {
        let slots = resolve_path(self.bank, self.supernet, path)?;
        let refs: Vec<&dyn ProjectionSlot> = slots.iter().map(|s| s as &dyn ProjectionSlot).collect();
        let f = vit::forward_features(tape, store, self.backbone, images, &refs, self.cls, drop_path)?;
        let logits = self.head.forward(tape, store, f.features)?;
        Ok(PathForward { logits, slot_outputs: f.slot_outputs })
    }

    /// Logits `[n, C]` over a sample set, in order, evaluated in chunks.
    pub fn logits(&self, store: &ParamStore, path: &PathSpec, data: &Samples, chunk: usize) -> Result<Tensor> {
        let mut out = Vec::new();
        let mut classes = 0;
        for (images, _) in data.chunks(chunk) {
            let mut tape = Tape::new();
            let f = self.forward(&mut tape, store, path, &images, None)?;
            let t = tape.value(f.logits);
            classes = t.cols();
            out.extend_from_slice(t.data());
        }
        Tensor::new(&[data.len(), classes], out)
    }

    /// Mean class token of each block's slot output along `path`.
    pub fn path_mean_tokens(&self, store: &ParamStore, path: &PathSpec, data: &Samples, chunk: usize) -> Result<Vec<Option<Vec<f64>>>> {
        if data.is_empty() {
            return Err(Error::Input("mean tokens of an empty dataset".into()));
        }
        let mut sums: Vec<Option<Vec<f64>>> = vec![None; path.ops.len()];
        for (images, _) in data.chunks(chunk) {
            let mut tape = Tape::new();
            let f = self.forward(&mut tape, store, path, &images, None)?;
            for (l, s) in f.slot_outputs.iter().enumerate() {
                if let Some(s) = s {
                    let c = tape.first_tokens(*s)?;
                    accumulate(&mut sums[l], tape.value(c));
                }
            }
        }
        Ok(sums.into_iter().map(|s| s.map(|v| v.into_iter().map(|x| x / data.len() as f64).collect())).collect())
    }
}

fn accumulate(sum: &mut Option<Vec<f64>>, rows: &Tensor) {
    let d = rows.cols();
    let acc = sum.get_or_insert_with(|| vec![0.0; d]);
    for r in 0..rows.rows() {
        for (a, v) in acc.iter_mut().zip(rows.row(r)) {
            *a += v;
        }
    }
}

/// Per block, per bank entry: mean class token of that entry's output on the
/// task's data. Every block input comes from the trunk formed by the base
/// experts (entry 0 everywhere); each entry is probed off that shared input.
pub fn compute_mean_tokens(
    store: &ParamStore,
    backbone: &Backbone,
    bank: &ExpertBank,
    data: &Samples,
    cls: Option<ParamId>,
    chunk: usize,
) -> Result<Vec<Vec<Vec<f64>>>> {
    if data.is_empty() {
        return Err(Error::Input("mean tokens of an empty dataset".into()));
    }
    let heads = backbone.config.num_heads;
    let mut sums: Vec<Vec<Option<Vec<f64>>>> = bank.blocks.iter().map(|b| vec![None; b.len()]).collect();
    for (images, _) in data.chunks(chunk) {
        let mut tape = Tape::new();
        let mut x = vit::patch_embed(&mut tape, store, backbone, &images, cls)?;
        for (l, block) in backbone.blocks.iter().enumerate() {
            let xn = block.ln1.forward(&mut tape, store, x)?;
            let u = vit::mhsa(&mut tape, store, block, xn, heads)?;
            let mut trunk = None;
            for k in 0..bank.len(l) {
                let out = Slot::Chain(bank.chain(l, k)?).apply(&mut tape, store, u)?.expect("chain output");
                let c = tape.first_tokens(out)?;
                accumulate(&mut sums[l][k], tape.value(c));
                if k == 0 {
                    trunk = Some(out);
                }
            }
            let z = tape.add(x, trunk.expect("base expert"))?;
            x = vit::ffn_residual(&mut tape, store, block, z, None)?;
        }
    }
    let n = data.len() as f64;
    Ok(sums
        .into_iter()
        .map(|b| b.into_iter().map(|s| s.expect("every entry probed").into_iter().map(|v| v / n).collect()).collect())
        .collect())
}

/// Result of freezing a task's choices into the bank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Consolidation {
    /// The path rewritten against the grown bank.
    pub path: PathSpec,
    /// Backbone parameters added to the bank (excludes head and token).
    pub params_added: usize,
}

/// Closed-form parameter count of a path's New/Adapt operations at width `d`.
pub fn closed_form_added(path: &PathSpec, d: usize, bank_sizes: &[usize]) -> usize {
    let da = adapter_hidden(d);
    path.ops
        .iter()
        .enumerate()
        .map(|(l, op)| match *op {
            GrowOp::New { expert } if expert >= bank_sizes[l] => d * d + d,
            GrowOp::Adapt { adapter, .. } if adapter >= bank_sizes[l] => 2 * d * da + da + d,
            _ => 0,
        })
        .sum()
}

/// Promotes the path's fresh New/Adapt parameters into the bank, freezes
/// them, and records their mean class tokens measured along the final path.
pub fn consolidate(
    store: &mut ParamStore,
    bank: &mut ExpertBank,
    supernet: &Supernet,
    path: &PathSpec,
    mean_tokens: &[Option<Vec<f64>>],
) -> Result<Consolidation> {
    if path.ops.len() != bank.depth() || mean_tokens.len() != bank.depth() {
        return Err(Error::Integrity("path, bank and mean tokens disagree on depth".into()));
    }
    let mut added = 0;
    for (l, op) in path.ops.iter().enumerate() {
        let base = supernet.fresh_base(l);
        if bank.len(l) != base {
            return Err(Error::Integrity(format!("bank at block {l} changed since the supernet was built")));
        }
        let mu = || {
            mean_tokens[l]
                .clone()
                .ok_or_else(|| Error::Integrity(format!("no mean token for block {l}")))
        };
        match *op {
            GrowOp::New { expert } if expert == base => {
                let p = supernet.fresh[l].new_proj;
                let proj = LinearParams { w: store.promote(p.w)?, b: store.promote(p.b)? };
                for id in proj.ids() {
                    store.set_trainable(id, false);
                }
                added += store.count(&proj.ids());
                let content_hash = store.content_hash(&proj.ids());
                bank.blocks[l].push(BankEntry::Expert(Expert {
                    proj,
                    mean_token: mu()?,
                    owner_task: path.task,
                    adapter_children: Vec::new(),
                    content_hash,
                }));
            }
            GrowOp::Adapt { target, adapter } if adapter == base => {
                let a = supernet.fresh[l].adapters[target];
                let params = AdapterParams {
                    down: LinearParams { w: store.promote(a.down.w)?, b: store.promote(a.down.b)? },
                    up: LinearParams { w: store.promote(a.up.w)?, b: store.promote(a.up.b)? },
                };
                for id in params.ids() {
                    store.set_trainable(id, false);
                }
                added += store.count(&params.ids());
                let content_hash = store.content_hash(&params.ids());
                bank.blocks[l][target].children_mut().push(base);
                bank.blocks[l].push(BankEntry::Adapter(Adapter {
                    params,
                    mode: AdapterMode::Residual,
                    mean_token: mu()?,
                    owner_task: path.task,
                    parent: target,
                    adapter_children: Vec::new(),
                    content_hash,
                }));
            }
            GrowOp::New { .. } | GrowOp::Adapt { .. } => {
                return Err(Error::Integrity(format!("operation {op:?} at block {l} is not fresh for this supernet")))
            }
            GrowOp::Reuse { target } => {
                bank.entry(l, target)?;
            }
            GrowOp::Skip => {}
        }
    }
    Ok(Consolidation { path: path.clone(), params_added: added })
}

#[cfg(test)]
mod tests;
