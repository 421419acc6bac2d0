use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a parameter. Persistent parameters survive across tasks and are
/// checkpointed; scratch parameters belong to the task being learned and are
/// either promoted or discarded when it completes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId {
    scratch: bool,
    index: u32,
}

impl ParamId {
    pub fn is_scratch(self) -> bool {
        self.scratch
    }
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Named parameter registry. Names are unique across both regions.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    persistent: Vec<Parameter>,
    scratch: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor, trainable: bool) -> Result<ParamId> {
        self.insert(name, tensor, trainable, false)
    }

    pub fn add_scratch(&mut self, name: &str, tensor: Tensor, trainable: bool) -> Result<ParamId> {
        self.insert(name, tensor, trainable, true)
    }

    fn insert(&mut self, name: &str, tensor: Tensor, trainable: bool, scratch: bool) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Integrity(format!("duplicate parameter name `{name}`")));
        }
        let region = if scratch { &mut self.scratch } else { &mut self.persistent };
        let id = ParamId { scratch, index: region.len() as u32 };
        region.push(Parameter { name: name.to_string(), tensor, trainable });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        if id.scratch {
            &self.scratch[id.index as usize]
        } else {
            &self.persistent[id.index as usize]
        }
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        if id.scratch {
            &mut self.scratch[id.index as usize]
        } else {
            &mut self.persistent[id.index as usize]
        }
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.get(id).tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn contains(&self, id: ParamId) -> bool {
        let region = if id.scratch { &self.scratch } else { &self.persistent };
        (id.index as usize) < region.len()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.get_mut(id).trainable = trainable;
    }

    pub fn freeze_all(&mut self) {
        for p in self.persistent.iter_mut().chain(self.scratch.iter_mut()) {
            p.trainable = false;
        }
    }

    /// Persistent parameters in id order.
    pub fn persistent(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.persistent
            .iter()
            .enumerate()
            .map(|(i, p)| (ParamId { scratch: false, index: i as u32 }, p))
    }

    pub fn persistent_len(&self) -> usize {
        self.persistent.len()
    }

    pub fn scratch_len(&self) -> usize {
        self.scratch.len()
    }

    /// Moves a scratch parameter into the persistent region and returns its
    /// new id. Other scratch ids stay valid until [`clear_scratch`](Self::clear_scratch).
    pub fn promote(&mut self, id: ParamId) -> Result<ParamId> {
        if !id.scratch {
            return Ok(id);
        }
        let p = self.scratch[id.index as usize].clone();
        let new_id = ParamId { scratch: false, index: self.persistent.len() as u32 };
        self.by_name.insert(p.name.clone(), new_id);
        self.persistent.push(p);
        // Leave a renamed tombstone behind so the scratch index stays valid.
        let tomb = &mut self.scratch[id.index as usize];
        tomb.name = format!("{}#promoted", tomb.name);
        tomb.trainable = false;
        Ok(new_id)
    }

    pub fn clear_scratch(&mut self) {
        for p in &self.scratch {
            if let Some(id) = self.by_name.get(&p.name) {
                if id.scratch {
                    self.by_name.remove(&p.name);
                }
            }
        }
        self.scratch.clear();
    }

    /// Rounds every value of the given parameters to the nearest `f32`.
    pub fn round_to_f32(&mut self, ids: &[ParamId]) {
        for &id in ids {
            for v in self.get_mut(id).tensor.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Parameter count over a set of ids.
    pub fn count(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.tensor(id).len()).sum()
    }

    /// SHA-256 over names, shapes and raw bits of the given parameters.
    pub fn content_hash(&self, ids: &[ParamId]) -> String {
        let mut h = Sha256::new();
        for &id in ids {
            let p = self.get(id);
            h.update(p.name.as_bytes());
            for &s in p.tensor.shape() {
                h.update((s as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Normal(0, std) truncated to two standard deviations by rejection.
pub fn trunc_normal<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = normal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape product")
}

pub const INIT_STD: f64 = 0.02;
