use rand::Rng;

use super::*;
use crate::numerics::finite_difference_check;

fn small(image: usize, patch: usize, d: usize, heads: usize) -> ViTConfig {
    ViTConfig { image_size: image, patch_size: patch, channels: 1, depth: 2, embed_dim: d, num_heads: heads, mlp_ratio: 2, drop_path_rate: 0.0 }
}

fn randomize(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut rng = Seeds::new(seed).stream("randomize");
    let ids: Vec<ParamId> = store.persistent().map(|(id, _)| id).collect();
    for id in ids {
        for v in store.get_mut(id).tensor.data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
}

fn images(b: usize, c: &ViTConfig, seed: u64) -> Tensor {
    let mut rng = Seeds::new(seed).stream("images");
    let n = b * c.channels * c.image_size * c.image_size;
    Tensor::new(&[b, c.channels, c.image_size, c.image_size], (0..n).map(|_| rng.random::<f64>()).collect()).unwrap()
}

#[test]
fn config_invariants() {
    assert!(ViTConfig::tiny().validate().is_ok());
    assert!(ViTConfig::vit_b8().validate().is_ok());
    assert_eq!(ViTConfig::vit_b8().head_dim() * 12, 768);
    let mut bad = ViTConfig::tiny();
    bad.num_heads = 5;
    assert!(bad.validate().is_err());
    let mut bad = ViTConfig::tiny();
    bad.image_size = 30;
    assert!(bad.validate().is_err());
}

#[test]
fn token_counts() {
    assert_eq!(ViTConfig::tiny().num_tokens(), 17);
    assert_eq!(ViTConfig::vit_b8().num_tokens(), 82);
    for (cfg, l) in [(ViTConfig::tiny(), 17), (small(72, 8, 16, 2), 82)] {
        let mut store = ParamStore::new();
        let (bb, _) = Backbone::init(cfg, &mut store, &Seeds::new(0)).unwrap();
        let mut tape = Tape::new();
        let x = patch_embed(&mut tape, &store, &bb, &images(2, &cfg, 1), None).unwrap();
        assert_eq!(tape.value(x).shape(), &[2, l, cfg.embed_dim]);
    }
}

#[test]
fn wrong_image_size_is_rejected() {
    let cfg = ViTConfig::tiny();
    let mut store = ParamStore::new();
    let (bb, _) = Backbone::init(cfg, &mut store, &Seeds::new(0)).unwrap();
    let mut tape = Tape::new();
    let img = Tensor::zeros(&[1, 1, 32, 32]);
    assert!(matches!(patch_embed(&mut tape, &store, &bb, &img, None), Err(Error::Input(_))));
}

#[test]
fn zero_image_and_weights_pass_positions_through() {
    let cfg = ViTConfig::tiny();
    let mut store = ParamStore::new();
    let (bb, _) = Backbone::init(cfg, &mut store, &Seeds::new(0)).unwrap();
    for id in [bb.patch.w, bb.patch.b, bb.cls] {
        let n = store.tensor(id).shape().to_vec();
        store.get_mut(id).tensor = Tensor::zeros(&n);
    }
    let mut tape = Tape::new();
    let x = patch_embed(&mut tape, &store, &bb, &Tensor::zeros(&[1, 1, 28, 28]), None).unwrap();
    assert_eq!(tape.value(x).data(), store.tensor(bb.pos).data());
}

#[test]
fn patchify_layout() {
    let cfg = small(4, 2, 4, 1);
    let img = Tensor::new(&[1, 1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
    let p = patchify(&img, &cfg).unwrap();
    assert_eq!(p.shape(), &[1, 4, 4]);
    assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
    assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
    assert_eq!(p.row(3), &[10.0, 11.0, 14.0, 15.0]);
}

#[test]
fn single_token_attention_returns_value() {
    let mut rng = Seeds::new(2).stream("x");
    let mut tape = Tape::new();
    let mk = |rng: &mut StreamRng| Tensor::new(&[1, 1, 8], (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let (q, k, v) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
    let (qv, kv, vv) = (tape.constant(q), tape.constant(k), tape.constant(v.clone()));
    let out = tape.attention(qv, kv, vv, 2).unwrap();
    assert!(tape.attention_probs(out).unwrap().iter().all(|&p| p == 1.0));
    assert_eq!(tape.value(out).data(), v.data());
}

#[test]
fn identical_keys_give_uniform_attention() {
    let mut rng = Seeds::new(3).stream("x");
    let l = 5;
    let row: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let k = Tensor::new(&[1, l, 8], row.repeat(l)).unwrap();
    let q = Tensor::new(&[1, l, 8], (0..l * 8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let mut tape = Tape::new();
    let (qv, kv) = (tape.constant(q.clone()), tape.constant(k));
    let vv = tape.constant(q);
    let out = tape.attention(qv, kv, vv, 2).unwrap();
    for p in tape.attention_probs(out).unwrap() {
        assert!((p - 1.0 / l as f64).abs() < 1e-15);
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let cfg = ViTConfig::tiny();
    let mut store = ParamStore::new();
    let (bb, _) = Backbone::init(cfg, &mut store, &Seeds::new(4)).unwrap();
    randomize(&mut store, 4, 0.5);
    let mut tape = Tape::new();
    let x = patch_embed(&mut tape, &store, &bb, &images(3, &cfg, 4), None).unwrap();
    let xn = bb.blocks[0].ln1.forward(&mut tape, &store, x).unwrap();
    let u = mhsa(&mut tape, &store, &bb.blocks[0], xn, cfg.num_heads).unwrap();
    let l = cfg.num_tokens();
    for row in tape.attention_probs(u).unwrap().chunks(l) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

struct Skip;
impl ProjectionSlot for Skip {
    fn apply(&self, _: &mut Tape, _: &ParamStore, _: Var) -> Result<Option<Var>> {
        Ok(None)
    }
}

#[test]
fn skip_slot_leaves_only_the_ffn() {
    let cfg = small(8, 4, 8, 2);
    let mut store = ParamStore::new();
    let (bb, _) = Backbone::init(cfg, &mut store, &Seeds::new(5)).unwrap();
    randomize(&mut store, 5, 0.5);
    let mut tape = Tape::new();
    let x = patch_embed(&mut tape, &store, &bb, &images(2, &cfg, 5), None).unwrap();
    let out = block_forward(&mut tape, &store, &bb.blocks[0], 2, x, &Skip, None).unwrap();
    assert!(out.slot_out.is_none());
    let blk = &bb.blocks[0];
    let zn = blk.ln2.forward(&mut tape, &store, x).unwrap();
    let h = blk.mlp_up.forward(&mut tape, &store, zn).unwrap();
    let h = tape.gelu(h);
    let f = blk.mlp_down.forward(&mut tape, &store, h).unwrap();
    let y = tape.add(x, f).unwrap();
    assert!(tape.value(y).bit_eq(tape.value(out.y)));
}

// Monolithic, loop-level evaluation of one transformer block.
fn reference_block(x: &[f64], l: usize, d: usize, heads: usize, store: &ParamStore, blk: &BlockWeights, proj: &LinearParams) -> Vec<f64> {
    let ln = |x: &[f64], g: &[f64], b: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for r in 0..l {
            let row = &x[r * d..(r + 1) * d];
            let m = row.iter().sum::<f64>() / d as f64;
            let v = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / d as f64;
            for j in 0..d {
                out[r * d + j] = (row[j] - m) / (v + LN_EPS).sqrt() * g[j] + b[j];
            }
        }
        out
    };
    let lin = |x: &[f64], p: &LinearParams| -> Vec<f64> {
        let w = store.tensor(p.w);
        let (fin, fout) = (w.shape()[0], w.shape()[1]);
        let b = store.tensor(p.b).data();
        let rows = x.len() / fin;
        let mut out = vec![0.0; rows * fout];
        for r in 0..rows {
            for o in 0..fout {
                out[r * fout + o] = b[o] + (0..fin).map(|i| x[r * fin + i] * w.data()[i * fout + o]).sum::<f64>();
            }
        }
        out
    };
    let t = |id| store.tensor(id).data();
    let xn = ln(x, t(blk.ln1.gamma), t(blk.ln1.beta));
    let (q, k, v) = (lin(&xn, &blk.query), lin(&xn, &blk.key), lin(&xn, &blk.value));
    let dh = d / heads;
    let mut u = vec![0.0; l * d];
    for h in 0..heads {
        for i in 0..l {
            let s: Vec<f64> = (0..l).map(|j| (0..dh).map(|c| q[i * d + h * dh + c] * k[j * d + h * dh + c]).sum::<f64>() / (dh as f64).sqrt()).collect();
            let m = s.iter().copied().fold(f64::MIN, f64::max);
            let z: f64 = s.iter().map(|a| (a - m).exp()).sum();
            for c in 0..dh {
                u[i * d + h * dh + c] = (0..l).map(|j| (s[j] - m).exp() / z * v[j * d + h * dh + c]).sum();
            }
        }
    }
    let p = lin(&u, proj);
    let z: Vec<f64> = x.iter().zip(&p).map(|(a, b)| a + b).collect();
    let zn = ln(&z, t(blk.ln2.gamma), t(blk.ln2.beta));
    let h: Vec<f64> = lin(&zn, &blk.mlp_up)
        .into_iter()
        .map(|a| 0.5 * a * (1.0 + (0.797_884_560_802_865_4 * (a + 0.044_715 * a * a * a)).tanh()))
        .collect();
    let f = lin(&h, &blk.mlp_down);
    z.iter().zip(&f).map(|(a, b)| a + b).collect()
}

#[test]
fn block_matches_monolithic_reference() {
    let cfg = ViTConfig::tiny();
    for seed in 0..3 {
        let mut store = ParamStore::new();
        let (bb, projs) = Backbone::init(cfg, &mut store, &Seeds::new(seed)).unwrap();
        randomize(&mut store, seed, 0.3);
        let mut tape = Tape::new();
        let x = patch_embed(&mut tape, &store, &bb, &images(1, &cfg, seed), None).unwrap();
        let xv = tape.value(x).data().to_vec();
        let out = block_forward(&mut tape, &store, &bb.blocks[1], cfg.num_heads, x, &projs[1], None).unwrap();
        let expect = reference_block(&xv, cfg.num_tokens(), cfg.embed_dim, cfg.num_heads, &store, &bb.blocks[1], &projs[1]);
        let got = tape.value(out.y).data();
        let err = got.iter().zip(&expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10, "{err}");
    }
}

#[test]
fn block_gradient_wrt_input_matches_finite_differences() {
    let cfg = small(8, 4, 8, 2);
    for seed in 0..20 {
        let mut store = ParamStore::new();
        let (bb, projs) = Backbone::init(cfg, &mut store, &Seeds::new(seed)).unwrap();
        randomize(&mut store, seed, 0.5);
        let mut tape = Tape::new();
        let x = patch_embed(&mut tape, &store, &bb, &images(2, &cfg, seed), None).unwrap();
        let x0 = tape.value(x).clone();
        let mut rng = Seeds::new(seed).stream("proj");
        let w: Vec<f64> = (0..x0.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let report = finite_difference_check(
            |t, v| {
                let out = block_forward(t, &store, &bb.blocks[0], 2, v[0], &projs[0], None)?;
                t.weighted_sum(out.y, w.clone())
            },
            &[x0],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}: {report:?}");
    }
}

#[test]
fn block_parameter_gradients_match_finite_differences() {
    let cfg = small(8, 4, 8, 2);
    let mut store = ParamStore::new();
    let (bb, projs) = Backbone::init(cfg, &mut store, &Seeds::new(9)).unwrap();
    randomize(&mut store, 9, 0.5);
    let img = images(2, &cfg, 9);
    let loss_of = |store: &ParamStore| -> (Tape, Var) {
        let mut tape = Tape::new();
        let slots: Vec<&dyn ProjectionSlot> = projs.iter().map(|p| p as &dyn ProjectionSlot).collect();
        let f = forward_features(&mut tape, store, &bb, &img, &slots, None, None).unwrap();
        let n = tape.value(f.features).len();
        let w = (0..n).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        let l = tape.weighted_sum(f.features, w).unwrap();
        (tape, l)
    };
    let (tape, loss) = loss_of(&store);
    let grads = tape.backward(loss).unwrap();
    let targets = [bb.blocks[0].query.w, bb.blocks[1].ln1.gamma, projs[0].w, bb.blocks[0].mlp_up.w, bb.pos, bb.cls, bb.norm.beta, bb.patch.w];
    let h = 1e-5;
    for id in targets {
        let g = grads.param(id).unwrap().to_vec();
        for j in (0..g.len()).step_by(g.len() / 5 + 1) {
            let orig = store.tensor(id).data()[j];
            store.get_mut(id).tensor.data_mut()[j] = orig + h;
            let (t, l) = loss_of(&store);
            let up = t.value(l).data()[0];
            store.get_mut(id).tensor.data_mut()[j] = orig - h;
            let (t, l) = loss_of(&store);
            let down = t.value(l).data()[0];
            store.get_mut(id).tensor.data_mut()[j] = orig;
            let num = (up - down) / (2.0 * h);
            let rel = (num - g[j]).abs() / num.abs().max(g[j].abs()).max(1e-6);
            assert!(rel < 1e-4, "{} [{j}]: {num} vs {}", store.get(id).name, g[j]);
        }
    }
}

#[test]
fn class_token_extraction_shapes() {
    for l in [1usize, 17, 82] {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[3, l, 4], (0..3 * l * 4).map(|v| v as f64).collect()).unwrap());
        let c = extract_class_token(&mut tape, x).unwrap();
        assert_eq!(tape.value(c).shape(), &[3, 4]);
        assert_eq!(tape.value(c).row(1), &[(l * 4) as f64, (l * 4 + 1) as f64, (l * 4 + 2) as f64, (l * 4 + 3) as f64]);
    }
}

#[test]
fn drop_path_zeroes_or_rescales_branches() {
    let cfg = small(8, 4, 8, 2);
    let mut store = ParamStore::new();
    let (bb, projs) = Backbone::init(cfg, &mut store, &Seeds::new(1)).unwrap();
    randomize(&mut store, 1, 0.5);
    let img = images(16, &cfg, 1);
    let mut tape = Tape::new();
    let x = patch_embed(&mut tape, &store, &bb, &img, None).unwrap();
    let mut rng = Seeds::new(1).stream("drop_path");
    let mut dp = DropPath { rate: 0.5, rng: &mut rng };
    let out = block_forward(&mut tape, &store, &bb.blocks[0], 2, x, &projs[0], Some(&mut dp)).unwrap();
    let plain = block_forward(&mut tape, &store, &bb.blocks[0], 2, x, &projs[0], None).unwrap();
    assert!(!tape.value(out.y).bit_eq(tape.value(plain.y)));
}

#[test]
fn init_is_deterministic() {
    let mut a = ParamStore::new();
    let mut b = ParamStore::new();
    Backbone::init(ViTConfig::tiny(), &mut a, &Seeds::new(42)).unwrap();
    Backbone::init(ViTConfig::tiny(), &mut b, &Seeds::new(42)).unwrap();
    let ids: Vec<ParamId> = a.persistent().map(|(id, _)| id).collect();
    assert_eq!(a.content_hash(&ids), b.content_hash(&ids));
}
