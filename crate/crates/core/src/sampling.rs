//! Task similarity and the exploration–exploitation path sampler.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::{GrowOp, PathSpec};
use crate::numerics::StreamRng;

/// Per block, per bank entry: raw cosine, normalized score, ψ and ρ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTable {
    pub raw: Vec<Vec<f64>>,
    pub score: Vec<Vec<f64>>,
    pub psi: Vec<Vec<f64>>,
    pub rho: Vec<Vec<f64>>,
}

impl SimilarityTable {
    pub fn from_raw(raw: Vec<Vec<f64>>) -> Result<Self> {
        if raw.is_empty() || raw.iter().any(Vec::is_empty) {
            return Err(Error::Input("similarity table needs at least one entry per block".into()));
        }
        if raw.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::Numeric("non-finite cosine similarity".into()));
        }
        let score = norm_cosine(&raw);
        let psi = score.iter().map(|s| expert_sampling_dist(s)).collect();
        let rho = score.iter().map(|s| s.iter().map(|&v| retention_prob(v)).collect()).collect();
        Ok(Self { raw, score, psi, rho })
    }

    /// Cosines between probed mean tokens and the stored ones, block by block.
    pub fn from_tokens(probed: &[Vec<Vec<f64>>], stored: &[Vec<&[f64]>]) -> Result<Self> {
        if probed.len() != stored.len() {
            return Err(Error::Dimension("probed and stored tokens disagree on depth".into()));
        }
        let mut raw = Vec::with_capacity(probed.len());
        for (p, s) in probed.iter().zip(stored) {
            if p.len() != s.len() {
                return Err(Error::Dimension("probed and stored tokens disagree on bank size".into()));
            }
            raw.push(p.iter().zip(s).map(|(a, b)| cosine(a, b)).collect());
        }
        Self::from_raw(raw)
    }

    pub fn depth(&self) -> usize {
        self.raw.len()
    }

    /// Machine-readable dump, one JSON record per block.
    pub fn dump(&self, task: usize) -> String {
        let mut out = String::new();
        for l in 0..self.depth() {
            let rec = serde_json::json!({
                "task": task,
                "block": l,
                "raw": self.raw[l],
                "score": self.score[l],
                "psi": self.psi[l],
                "rho": self.rho[l],
            });
            out += &rec.to_string();
            out.push('\n');
        }
        out
    }
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Rescales all cosines to `[-1, 1]` using the global min and max over every
/// block. A constant table maps to zeros.
pub fn norm_cosine(raw: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (lo, hi) = raw
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &c| (lo.min(c), hi.max(c)));
    raw.iter()
        .map(|b| {
            b.iter()
                .map(|&c| if hi > lo { (2.0 * (c - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0) } else { 0.0 })
                .collect()
        })
        .collect()
}

/// ψ: softmax of the scores at one block.
pub fn expert_sampling_dist(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// ρ: sigmoid of a score.
pub fn retention_prob(score: f64) -> f64 {
    1.0 / (1.0 + (-score).exp())
}

/// Analytic distribution of one hierarchical draw at a block.
#[derive(Debug, Clone, PartialEq)]
pub struct OpLaw {
    pub reuse: Vec<f64>,
    pub adapt: Vec<f64>,
    pub skip: f64,
    pub new: f64,
}

impl OpLaw {
    pub fn prob(&self, op: &GrowOp) -> f64 {
        match *op {
            GrowOp::Reuse { target } => self.reuse.get(target).copied().unwrap_or(0.0),
            GrowOp::Adapt { target, .. } => self.adapt.get(target).copied().unwrap_or(0.0),
            GrowOp::Skip => self.skip,
            GrowOp::New { .. } => self.new,
        }
    }

    /// Probabilities in the order Reuse(e), Adapt(e) for each e, New, Skip.
    pub fn flat(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.reuse.iter().zip(&self.adapt).flat_map(|(r, a)| [*r, *a]).collect();
        v.push(self.new);
        v.push(self.skip);
        v
    }
}

pub fn compound_law(psi: &[f64], rho: &[f64]) -> OpLaw {
    let reuse = psi.iter().zip(rho).map(|(p, r)| p * r * r).collect();
    let adapt = psi.iter().zip(rho).map(|(p, r)| p * r * (1.0 - r)).collect();
    let ignored: f64 = psi.iter().zip(rho).map(|(p, r)| p * (1.0 - r)).sum();
    OpLaw { reuse, adapt, skip: 0.5 * ignored, new: 0.5 * ignored }
}

fn categorical(p: &[f64], rng: &mut StreamRng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|&pi| pi > 0.0).unwrap_or(0)
}

/// Draws an expert by ψ, keeps it with probability ρ (then Reuse w.p. ρ,
/// else Adapt), otherwise flips a fair coin between Skip and New. Fresh ids
/// equal the current bank size at the block.
pub fn sample_op_hierarchical(table: &SimilarityTable, l: usize, rng: &mut StreamRng) -> GrowOp {
    let fresh = table.psi[l].len();
    let e = categorical(&table.psi[l], rng);
    let rho = table.rho[l][e];
    if rng.random::<f64>() < rho {
        if rng.random::<f64>() < rho {
            GrowOp::Reuse { target: e }
        } else {
            GrowOp::Adapt { target: e, adapter: fresh }
        }
    } else if rng.random::<bool>() {
        GrowOp::Skip
    } else {
        GrowOp::New { expert: fresh }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Uniform,
    Hierarchical,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Uniform => "uniform",
            Strategy::Hierarchical => "hierarchical",
        })
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Strategy::Uniform),
            "hierarchical" => Ok(Strategy::Hierarchical),
            other => Err(Error::Input(format!("unknown sampling strategy {other:?}"))),
        }
    }
}

/// One path: every block drawn independently.
pub fn sample_path(
    mode: Strategy,
    task: usize,
    candidates: &[Vec<GrowOp>],
    table: Option<&SimilarityTable>,
    rng: &mut StreamRng,
) -> Result<PathSpec> {
    let ops = match (mode, table) {
        (Strategy::Uniform, _) => candidates.iter().map(|c| c[rng.random_range(0..c.len())]).collect(),
        (Strategy::Hierarchical, Some(t)) => {
            if t.depth() != candidates.len() {
                return Err(Error::Dimension("similarity table depth differs from the supernet".into()));
            }
            (0..t.depth()).map(|l| sample_op_hierarchical(t, l, rng)).collect()
        }
        (Strategy::Hierarchical, None) => {
            return Err(Error::Input("hierarchical sampling needs a similarity table".into()))
        }
    };
    Ok(PathSpec { task, ops })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Probability of a pure-exploration (uniform) supernet epoch.
    pub epsilon1: f64,
    /// Probability of a uniform draw when seeding the evolutionary population.
    pub epsilon2: f64,
    /// Base name of the sampler's random streams.
    pub stream: String,
    /// When false, every epoch samples uniformly.
    pub hierarchical: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { epsilon1: 0.3, epsilon2: 0.5, stream: "sampler".into(), hierarchical: true }
    }
}

impl SamplerConfig {
    pub fn uniform() -> Self {
        Self { hierarchical: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.epsilon1 && self.epsilon1 <= self.epsilon2 && self.epsilon2 <= 1.0) {
            return Err(Error::Input(format!(
                "need 0 <= epsilon1 <= epsilon2 <= 1, got {} and {}",
                self.epsilon1, self.epsilon2
            )));
        }
        Ok(())
    }
}

/// Uniform with probability `epsilon`, hierarchical otherwise.
pub fn choose_epoch_strategy(epsilon: f64, rng: &mut StreamRng) -> Strategy {
    if rng.random::<f64>() < epsilon {
        Strategy::Uniform
    } else {
        Strategy::Hierarchical
    }
}
