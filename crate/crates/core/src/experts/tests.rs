use rand::Rng;

use super::*;
use crate::taskdata::Geometry;
use crate::vit::ViTConfig;

use crate::testutil::{randomize_ids, world};

fn data(n: usize, seed: u64) -> Samples {
    let g = Geometry::gray(8);
    let mut rng = Seeds::new(seed).stream("data");
    Samples::new(g, (0..n * 64).map(|_| rng.random::<f64>()).collect(), (0..n).map(|i| i % 3).collect()).unwrap()
}

fn u_input(seed: u64) -> (Tape, Var) {
    let mut rng = Seeds::new(seed).stream("u");
    let mut tape = Tape::new();
    let u = tape.constant(Tensor::new(&[2, 5, 8], (0..80).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap());
    (tape, u)
}

#[test]
fn candidate_counts() {
    let mut w = world(1);
    let sn = construct_supernet(&w.bank, &mut w.store, 1, &Seeds::new(1)).unwrap();
    assert!(sn.candidates.iter().all(|c| c.len() == 4));
    assert_eq!(sn.search_space_size(), 64);

    let cfg = ViTConfig { depth: 4, ..crate::testutil::small_config() };
    let mut store = ParamStore::new();
    let (_, projections) = Backbone::init(cfg, &mut store, &Seeds::new(0)).unwrap();
    let bank = ExpertBank::from_base(&mut store, &projections, vec![vec![0.0; 8]; 4]).unwrap();
    let sn = construct_supernet(&bank, &mut store, 1, &Seeds::new(0)).unwrap();
    assert_eq!(sn.search_space_size(), 256);
}

#[test]
fn two_experts_give_six_candidates() {
    let mut w = world(2);
    let sn = construct_supernet(&w.bank, &mut w.store, 1, &Seeds::new(2)).unwrap();
    let path = PathSpec { task: 1, ops: vec![GrowOp::New { expert: 1 }; 3] };
    consolidate(&mut w.store, &mut w.bank, &sn, &path, &[Some(vec![0.0; 8]), Some(vec![0.0; 8]), Some(vec![0.0; 8])]).unwrap();
    w.store.clear_scratch();
    let sn = construct_supernet(&w.bank, &mut w.store, 2, &Seeds::new(2)).unwrap();
    assert!(sn.candidates.iter().all(|c| c.len() == 6));
}

#[test]
fn fresh_parameters_are_trainable_and_the_rest_frozen() {
    let mut w = world(3);
    let sn = construct_supernet(&w.bank, &mut w.store, 1, &Seeds::new(3)).unwrap();
    let fresh = sn.all_fresh_params();
    assert!(fresh.iter().all(|&id| w.store.get(id).trainable && id.is_scratch()));
    assert!(w.store.persistent().all(|(_, p)| !p.trainable));
    for f in &sn.fresh {
        for a in &f.adapters {
            assert!(a.up.ids().iter().all(|&id| w.store.tensor(id).data().iter().all(|&v| v == 0.0)));
        }
    }
}

#[test]
fn residual_zero_up_equals_reuse() {
    let mut w = world(4);
    let mut sn = construct_supernet(&w.bank, &mut w.store, 1, &Seeds::new(4)).unwrap();
    sn.adapter_mode = AdapterMode::Residual;
    let (mut tape, u) = u_input(4);
    let adapt = apply_op(&mut tape, &w.store, &w.bank, Some(&sn), 0, GrowOp::Adapt { target: 0, adapter: 1 }, u).unwrap().unwrap();
    let reuse = apply_op(&mut tape, &w.store, &w.bank, Some(&sn), 0, GrowOp::Reuse { target: 0 }, u).unwrap().unwrap();
    assert!(tape.value(adapt).bit_eq(tape.value(reuse)));
}

#[test]
fn plain_and_residual_differ_by_the_expert_output() {
    for seed in 0..20 {
        let mut w = world(seed);
        let mut sn = construct_supernet(&w.bank, &mut w.store, 1, &Seeds::new(seed)).unwrap();
        randomize_ids(&mut w.store, &sn.all_fresh_params(), seed);
        let (mut tape, u) = u_input(seed);
        let op = GrowOp::Adapt { target: 0, adapter: 1 };
        let plain = apply_op(&mut tape, &w.store, &w.bank, Some(&sn), 1, op, u).unwrap().unwrap();
        sn.adapter_mode = AdapterMode::Residual;
        let res = apply_op(&mut tape, &w.store, &w.bank, Some(&sn), 1, op, u).unwrap().unwrap();
        let pe = apply_op(&mut tape, &w.store, &w.bank, Some(&sn), 1, GrowOp::Reuse { target: 0 }, u).unwrap().unwrap();
        let sum = tape.add(pe, plain).unwrap();
        assert!(tape.value(res).bit_eq(tape.value(sum)), "seed {seed}");
    }
}

#[test]
fn skip_and_dangling_ids() {
    let mut w = world(5);
    let sn = construct_supernet(&w.bank, &mut w.store, 1, &Seeds::new(5)).unwrap();
    let (mut tape, u) = u_input(5);
    assert!(apply_op(&mut tape, &w.store, &w.bank, Some(&sn), 0, GrowOp::Skip, u).unwrap().is_none());
    for op in [GrowOp::Reuse { target: 3 }, GrowOp::New { expert: 7 }, GrowOp::Adapt { target: 4, adapter: 1 }] {
        let r = apply_op(&mut tape, &w.store, &w.bank, Some(&sn), 0, op, u);
        assert!(matches!(r, Err(Error::Integrity(_))), "{op:?}");
    }
    let r = apply_op(&mut tape, &w.store, &w.bank, None, 0, GrowOp::New { expert: 1 }, u);
    assert!(matches!(r, Err(Error::Integrity(_))));
}

#[test]
fn reuse_of_base_expert_is_the_plain_block() {
    let w = world(6);
    let model = PathModel { backbone: &w.backbone, bank: &w.bank, supernet: None, head: w.head, cls: None };
    let d = data(3, 6);
    let (imgs, _) = d.to_batch();
    let mut tape = Tape::new();
    let f = model.forward(&mut tape, &w.store, &PathSpec::all_reuse(0, 3, 0), &imgs, None).unwrap();
    let slots: Vec<LinearParams> = w.bank.blocks.iter().map(|b| match &b[0] { BankEntry::Expert(e) => e.proj, _ => unreachable!() }).collect();
    let refs: Vec<&dyn ProjectionSlot> = slots.iter().map(|s| s as &dyn ProjectionSlot).collect();
    let mut t2 = Tape::new();
    let g = vit::forward_features(&mut t2, &w.store, &w.backbone, &imgs, &refs, None, None).unwrap();
    let logits = w.head.forward(&mut t2, &w.store, g.features).unwrap();
    assert!(tape.value(f.logits).bit_eq(t2.value(logits)));
}

#[test]
fn mean_tokens_of_one_sample() {
    let w = world(7);
    let one = data(1, 7);
    let mu = compute_mean_tokens(&w.store, &w.backbone, &w.bank, &one, None, 8).unwrap();
    let model = PathModel { backbone: &w.backbone, bank: &w.bank, supernet: None, head: w.head, cls: None };
    let direct = model.path_mean_tokens(&w.store, &PathSpec::all_reuse(0, 3, 0), &one, 8).unwrap();
    for l in 0..3 {
        assert_eq!(mu[l].len(), 1);
        let a = &mu[l][0];
        let b = direct[l].as_ref().unwrap();
        assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12));
    }
}

#[test]
fn mean_tokens_are_invariant_to_duplication() {
    let w = world(8);
    let d = data(5, 8);
    let dd = d.concat(&d).unwrap();
    let a = compute_mean_tokens(&w.store, &w.backbone, &w.bank, &d, None, 2).unwrap();
    let b = compute_mean_tokens(&w.store, &w.backbone, &w.bank, &dd, None, 3).unwrap();
    for (x, y) in a.iter().flatten().flatten().zip(b.iter().flatten().flatten()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn mean_tokens_average_two_direct_passes() {
    let mut w = world(9);
    let sn = construct_supernet(&w.bank, &mut w.store, 1, &Seeds::new(9)).unwrap();
    randomize_ids(&mut w.store, &sn.all_fresh_params(), 9);
    let path = PathSpec { task: 1, ops: vec![GrowOp::Adapt { target: 0, adapter: 1 }, GrowOp::New { expert: 1 }, GrowOp::Reuse { target: 0 }] };
    let mus = vec![Some(vec![0.0; 8]); 3];
    consolidate(&mut w.store, &mut w.bank, &sn, &path, &mus).unwrap();
    w.store.clear_scratch();
    let two = data(2, 9);
    let mu = compute_mean_tokens(&w.store, &w.backbone, &w.bank, &two, None, 8).unwrap();
    // Oracle: per sample, walk the base trunk and evaluate every target by hand.
    let mut expect = vec![vec![vec![0.0; 8]; 2]; 3];
    for i in 0..2 {
        let (img, _) = two.subset(&[i]).to_batch();
        let mut tape = Tape::new();
        let mut x = vit::patch_embed(&mut tape, &w.store, &w.backbone, &img, None).unwrap();
        for l in 0..3 {
            let blk = &w.backbone.blocks[l];
            let xn = blk.ln1.forward(&mut tape, &w.store, x).unwrap();
            let u = vit::mhsa(&mut tape, &w.store, blk, xn, 2).unwrap();
            for k in 0..w.bank.len(l) {
                let out = match (l, k) {
                    (_, 0) => apply_op(&mut tape, &w.store, &w.bank, None, l, GrowOp::Reuse { target: 0 }, u),
                    (0, 1) => apply_op(&mut tape, &w.store, &w.bank, None, l, GrowOp::Adapt { target: 0, adapter: 1 }, u),
                    (1, 1) => apply_op(&mut tape, &w.store, &w.bank, None, l, GrowOp::New { expert: 1 }, u),
                    _ => unreachable!(),
                }
                .unwrap()
                .unwrap();
                let v = tape.value(out);
                for j in 0..8 {
                    expect[l][k][j] += v.data()[j] / 2.0;
                }
            }
            let base = apply_op(&mut tape, &w.store, &w.bank, None, l, GrowOp::Reuse { target: 0 }, u).unwrap().unwrap();
            let z = tape.add(x, base).unwrap();
            x = vit::ffn_residual(&mut tape, &w.store, blk, z, None).unwrap();
        }
    }
    for l in 0..3 {
        assert_eq!(mu[l].len(), w.bank.len(l));
        for k in 0..w.bank.len(l) {
            for j in 0..8 {
                assert!((mu[l][k][j] - expect[l][k][j]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn mean_tokens_reject_empty_data() {
    let w = world(10);
    let empty = Samples::empty(Geometry::gray(8));
    assert!(matches!(compute_mean_tokens(&w.store, &w.backbone, &w.bank, &empty, None, 4), Err(Error::Input(_))));
}

#[test]
fn consolidate_counts_and_grows() {
    let mut w = world(11);
    let sn = construct_supernet(&w.bank, &mut w.store, 1, &Seeds::new(11)).unwrap();
    let all_reuse = PathSpec::all_reuse(1, 3, 0);
    let mus = vec![Some(vec![0.0; 8]); 3];
    let before = w.bank.clone();
    let c = consolidate(&mut w.store, &mut w.bank, &sn, &all_reuse, &mus).unwrap();
    assert_eq!(c.params_added, 0);
    assert_eq!(w.bank.blocks.iter().map(Vec::len).collect::<Vec<_>>(), before.blocks.iter().map(Vec::len).collect::<Vec<_>>());

    let path = PathSpec { task: 1, ops: vec![GrowOp::New { expert: 1 }, GrowOp::Adapt { target: 0, adapter: 1 }, GrowOp::Skip] };
    let c = consolidate(&mut w.store, &mut w.bank, &sn, &path, &mus).unwrap();
    assert_eq!(c.params_added, (64 + 8) + (2 * 8 * 2 + 2 + 8));
    assert_eq!(c.params_added, closed_form_added(&path, 8, &[1, 1, 1]));
    assert_eq!(w.bank.blocks.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 2, 1]);
    match &w.bank.blocks[1][0] {
        BankEntry::Expert(e) => assert_eq!(e.adapter_children, vec![1]),
        _ => unreachable!(),
    }
    assert!(w.bank.param_ids().iter().all(|&id| !id.is_scratch() && !w.store.get(id).trainable));
}

#[test]
fn tiny_new_expert_adds_4160() {
    let path = PathSpec { task: 1, ops: vec![GrowOp::New { expert: 1 }, GrowOp::Skip, GrowOp::Reuse { target: 0 }, GrowOp::Skip] };
    assert_eq!(closed_form_added(&path, 64, &[1; 4]), 4160);
    let cfg = ViTConfig::tiny();
    let mut store = ParamStore::new();
    let (_, projections) = Backbone::init(cfg, &mut store, &Seeds::new(0)).unwrap();
    let mut bank = ExpertBank::from_base(&mut store, &projections, vec![vec![0.0; 64]; 4]).unwrap();
    let sn = construct_supernet(&bank, &mut store, 1, &Seeds::new(0)).unwrap();
    let c = consolidate(&mut store, &mut bank, &sn, &path, &vec![Some(vec![0.0; 64]); 4]).unwrap();
    assert_eq!(c.params_added, 4160);
}

#[test]
fn vit_b8_three_new_four_adapt() {
    let mut ops = vec![GrowOp::Reuse { target: 0 }; 12];
    for op in ops.iter_mut().take(3) {
        *op = GrowOp::New { expert: 1 };
    }
    for op in ops.iter_mut().skip(3).take(4) {
        *op = GrowOp::Adapt { target: 0, adapter: 1 };
    }
    let n = closed_form_added(&PathSpec { task: 1, ops }, 768, &[1; 12]);
    assert_eq!(n, 2_955_264);
    assert!((2_900_000..=3_100_000).contains(&n));
}

#[test]
fn consolidated_entries_keep_their_hash() {
    let mut w = world(12);
    let sn = construct_supernet(&w.bank, &mut w.store, 1, &Seeds::new(12)).unwrap();
    let path = PathSpec { task: 1, ops: vec![GrowOp::New { expert: 1 }, GrowOp::Adapt { target: 0, adapter: 1 }, GrowOp::Skip] };
    consolidate(&mut w.store, &mut w.bank, &sn, &path, &vec![Some(vec![0.0; 8]); 3]).unwrap();
    w.store.clear_scratch();
    w.bank.verify(&w.store).unwrap();
    let sn2 = construct_supernet(&w.bank, &mut w.store, 2, &Seeds::new(13)).unwrap();
    randomize_ids(&mut w.store, &sn2.all_fresh_params(), 13);
    w.bank.verify(&w.store).unwrap();
    let id = w.bank.blocks[0][1].param_ids()[0];
    w.store.get_mut(id).tensor.data_mut()[0] += 1.0;
    assert!(matches!(w.bank.verify(&w.store), Err(Error::Integrity(_))));
}

#[test]
fn adapt_on_adapt_stacks_residually() {
    let mut w = world(14);
    let sn = construct_supernet(&w.bank, &mut w.store, 1, &Seeds::new(14)).unwrap();
    randomize_ids(&mut w.store, &sn.all_fresh_params(), 14);
    let p1 = PathSpec { task: 1, ops: vec![GrowOp::Adapt { target: 0, adapter: 1 }, GrowOp::Reuse { target: 0 }, GrowOp::Reuse { target: 0 }] };
    consolidate(&mut w.store, &mut w.bank, &sn, &p1, &vec![Some(vec![0.0; 8]); 3]).unwrap();
    w.store.clear_scratch();
    let mut sn2 = construct_supernet(&w.bank, &mut w.store, 2, &Seeds::new(15)).unwrap();
    assert_eq!(sn2.candidates[0].len(), 6);
    sn2.adapter_mode = AdapterMode::Residual;
    let (mut tape, u) = u_input(14);
    // Zero up-weights: stacking on the adapter reproduces the adapter's own output.
    let stacked = apply_op(&mut tape, &w.store, &w.bank, Some(&sn2), 0, GrowOp::Adapt { target: 1, adapter: 2 }, u).unwrap().unwrap();
    let own = apply_op(&mut tape, &w.store, &w.bank, None, 0, GrowOp::Reuse { target: 1 }, u).unwrap().unwrap();
    let base = apply_op(&mut tape, &w.store, &w.bank, None, 0, GrowOp::Reuse { target: 0 }, u).unwrap().unwrap();
    assert!(tape.value(stacked).bit_eq(tape.value(own)));
    assert!(!tape.value(own).bit_eq(tape.value(base)));
}

#[test]
fn grid_round_trip_and_cells() {
    let paths = vec![
        PathSpec::all_reuse(0, 4, 0),
        PathSpec { task: 1, ops: vec![GrowOp::Reuse { target: 0 }, GrowOp::Skip, GrowOp::New { expert: 1 }, GrowOp::Adapt { target: 0, adapter: 1 }] },
    ];
    let text = grid::to_jsonl(&paths);
    assert_eq!(grid::from_jsonl(&text).unwrap(), paths);
    let ascii = grid::to_ascii(&paths);
    let rows: Vec<Vec<&str>> = ascii.lines().map(|l| l.split('|').map(str::trim).collect()).collect();
    assert_eq!(rows[0], vec!["task", "B1", "B2", "B3", "B4"]);
    assert_eq!(rows[1], vec!["T1", "R(0)", "R(0)", "R(0)", "R(0)"]);
    assert_eq!(rows[2][3], "N");
    assert_eq!(rows[2][4], "A(0)");
    assert!(matches!(grid::from_jsonl("{oops}"), Err(Error::Format(_))));
}
