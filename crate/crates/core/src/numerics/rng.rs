//! Named random streams.
//!
//! Every stochastic site asks for its own stream by name. A stream is a
//! ChaCha8 generator keyed by `sha256(run_seed || name)`, so the values a
//! site sees never depend on how many draws other sites made before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Root of a tree of named streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Seeds {
    key: [u8; 32],
}

impl Seeds {
    pub fn new(run_seed: u64) -> Self {
        Self::derive(&[0u8; 32], &run_seed.to_le_bytes())
    }

    fn derive(parent: &[u8; 32], label: &[u8]) -> Self {
        let mut h = Sha256::new();
        h.update(parent);
        h.update((label.len() as u64).to_le_bytes());
        h.update(label);
        Self { key: h.finalize().into() }
    }

    /// A sub-tree, e.g. `seeds.child("task3")`.
    pub fn child(&self, name: &str) -> Seeds {
        Self::derive(&self.key, name.as_bytes())
    }

    /// A generator for one stochastic site.
    pub fn stream(&self, name: &str) -> StreamRng {
        ChaCha8Rng::from_seed(self.child(name).key)
    }
}
