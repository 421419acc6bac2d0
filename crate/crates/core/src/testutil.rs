//! Small worlds shared by unit tests.

use rand::Rng;

use crate::experts::ExpertBank;
use crate::numerics::{ParamId, ParamStore, Seeds};
use crate::taskdata::{Geometry, Samples};
use crate::vit::{Backbone, LinearParams, ViTConfig};

pub fn small_config() -> ViTConfig {
    ViTConfig { image_size: 8, patch_size: 4, channels: 1, depth: 3, embed_dim: 8, num_heads: 2, mlp_ratio: 2, drop_path_rate: 0.0 }
}

pub struct World {
    pub store: ParamStore,
    pub backbone: Backbone,
    pub bank: ExpertBank,
    pub head: LinearParams,
}

/// Randomized, frozen trunk with a one-expert bank and a frozen 3-way head.
pub fn world(seed: u64) -> World {
    let cfg = small_config();
    let mut store = ParamStore::new();
    let seeds = Seeds::new(seed);
    let (backbone, projections) = Backbone::init(cfg, &mut store, &seeds).unwrap();
    randomize(&mut store, seed);
    let mu = vec![vec![0.0; cfg.embed_dim]; cfg.depth];
    let bank = ExpertBank::from_base(&mut store, &projections, mu).unwrap();
    let head = LinearParams::init(&mut store, "head.0", cfg.embed_dim, 3, &mut seeds.stream("head"), false).unwrap();
    store.freeze_all();
    World { store, backbone, bank, head }
}

pub fn randomize(store: &mut ParamStore, seed: u64) {
    let ids: Vec<ParamId> = store.persistent().map(|(id, _)| id).collect();
    randomize_ids(store, &ids, seed);
}

pub fn randomize_ids(store: &mut ParamStore, ids: &[ParamId], seed: u64) {
    let mut rng = Seeds::new(seed).stream("randomize");
    for &id in ids {
        for v in store.get_mut(id).tensor.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
}

/// Uniform noise images with labels cycling over three classes.
pub fn noise(n: usize, seed: u64) -> Samples {
    let g = Geometry::gray(8);
    let mut rng = Seeds::new(seed).stream("data");
    Samples::new(g, (0..n * 64).map(|_| rng.random::<f64>()).collect(), (0..n).map(|i| i % 3).collect()).unwrap()
}

/// Three classes told apart by which quadrant is lit.
pub fn quadrants(n: usize, seed: u64) -> Samples {
    let g = Geometry::gray(8);
    let mut rng = Seeds::new(seed).stream("quadrants");
    let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let images = labels
        .iter()
        .flat_map(|&l| {
            let mut img: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..0.1)).collect();
            for i in 0..4 {
                for j in 0..4 {
                    img[(4 * (l / 2) + i) * 8 + 4 * (l % 2) + j] += 0.9;
                }
            }
            img
        })
        .collect();
    Samples::new(g, images, labels).unwrap()
}
