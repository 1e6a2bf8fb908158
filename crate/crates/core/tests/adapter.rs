mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slgnet::adapter::{phi_map, AdapterConfig, FfAdapter, OffsetUnits, SparseAttentionParams, StageEvolver};
use slgnet::backbone::TokenGrid;
use slgnet::structure::StructuralPyramid;
use slgnet::{ParamId, ParamStore, Session, Tensor};

const EXTENTS: [(usize, usize); 3] = [(8, 8), (4, 4), (2, 2)];

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn set(store: &mut ParamStore, id: ParamId, mut f: impl FnMut(usize) -> f64) {
    for (i, v) in store.get_mut(id).tensor.data_mut().iter_mut().enumerate() {
        *v = f(i);
    }
}

fn identity(d: usize) -> impl Fn(usize) -> f64 {
    move |i| if i / d == i % d { 1.0 } else { 0.0 }
}

#[test]
fn phi_map_cases() {
    assert_eq!(phi_map((0.5, 0.5), (8, 8)), (3.5, 3.5));
    assert_eq!(phi_map((0.0, 0.0), (8, 8)), (-0.5, -0.5));
    assert_eq!(phi_map((1.0, 0.25), (4, 8)), (7.5, 0.5));
}

#[test]
fn corner_point_clamps_to_first_pixel() {
    let mut r = rng(1);
    let map = Tensor::uniform(&[1, 3, 3, 2], -1.0, 1.0, &mut r);
    let mut tape = slgnet::Tape::new();
    let m = tape.constant(map.clone());
    let p = tape.constant(Tensor::new(vec![1, 1, 2], vec![0.0, 0.0]).unwrap());
    let y = tape.bilinear(m, p).unwrap();
    assert_eq!(tape.data(y), &map.data()[..2]);
}

#[test]
fn vectorized_attention_matches_triple_loop() {
    for seed in 0..20 {
        for units in [OffsetUnits::Pixel, OffsetUnits::Normalized] {
            let err = common::sparse_attention_trial(seed, units);
            assert!(err < 1e-10, "seed {seed} {units:?}: {err}");
        }
    }
}

fn setup(d: usize, k: usize) -> (ParamStore, SparseAttentionParams) {
    let mut store = ParamStore::new();
    let p = SparseAttentionParams::new(&mut store, "attn", 1, d, k, OffsetUnits::Pixel, EXTENTS, &mut rng(2));
    (store, p)
}

fn constant_levels(n: usize, d: usize, c: f64) -> [Tensor; 3] {
    EXTENTS.map(|(h, w)| Tensor::full(&[n, h, w, d], c))
}

fn attend(store: &ParamStore, p: &SparseAttentionParams, tokens: &Tensor, levels: &[Tensor; 3]) -> Tensor {
    let mut s = Session::new(store);
    let x = s.tape.constant(tokens.clone());
    let lv = levels.clone().map(|l| s.tape.constant(l));
    let grid = TokenGrid { tokens: x, grid_h: 4, grid_w: 4 };
    let y = p.attend(&mut s, &grid, &StructuralPyramid { levels: lv, extents: EXTENTS }).unwrap();
    s.tape.value(y).clone()
}

#[test]
fn constant_pyramid_gives_constant_output() {
    let d = 5;
    let (mut store, p) = setup(d, 4);
    set(&mut store, p.value_proj.weight, identity(d));
    set(&mut store, p.gate, |_| 1.0);
    let tokens = Tensor::uniform(&[2, 16, d], -1.0, 1.0, &mut rng(3));
    let out = attend(&store, &p, &tokens, &constant_levels(2, d, 0.75));
    assert!(out.data().iter().all(|v| (v - 0.75).abs() < 1e-14));
}

#[test]
fn one_hot_weight_selects_level_one_reference() {
    let d = 3;
    let (mut store, p) = setup(d, 2);
    set(&mut store, p.value_proj.weight, |i| (i as f64 * 0.37).sin());
    set(&mut store, p.value_proj.bias.unwrap(), |i| 0.1 * i as f64);
    set(&mut store, p.gate, |_| 1.0);
    // huge logit on (level 1, point 1)
    set(&mut store, p.weight_head.bias.unwrap(), |i| if i == 0 { 200.0 } else { 0.0 });
    let mut r = rng(4);
    let levels = EXTENTS.map(|(h, w)| Tensor::uniform(&[1, h, w, d], -1.0, 1.0, &mut r));
    let tokens = Tensor::uniform(&[1, 16, d], -1.0, 1.0, &mut r);
    let out = attend(&store, &p, &tokens, &levels);
    let wv = store.get(p.value_proj.weight).tensor.clone();
    let bv = store.get(p.value_proj.bias.unwrap()).tensor.clone();
    for q in 0..16 {
        // 4×4 token grid over an 8×8 level: reference point sits between pixels
        let (gx, gy) = (q % 4, q / 4);
        let (px, py) = phi_map(((gx as f64 + 0.5) / 4.0, (gy as f64 + 0.5) / 4.0), (8, 8));
        let (x0, y0) = (px.floor() as usize, py.floor() as usize);
        for c in 0..d {
            let v: f64 = (0..d)
                .map(|j| {
                    let at = |y: usize, x: usize| levels[0].at(&[0, y, x, j]);
                    let sample = 0.25 * (at(y0, x0) + at(y0, x0 + 1) + at(y0 + 1, x0) + at(y0 + 1, x0 + 1));
                    sample * wv.at(&[j, c])
                })
                .sum::<f64>()
                + bv.data()[c];
            assert!((out.at(&[0, q, c]) - v).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_weights_sum_to_one() {
    let d = 4;
    let (mut store, p) = setup(d, 3);
    let mut r = rng(5);
    set(&mut store, p.weight_head.weight, |i| ((i * 7 % 11) as f64 - 5.0) * 0.3);
    let mut s = Session::new(&store);
    let x = s.tape.constant(Tensor::uniform(&[2, 16, d], -2.0, 2.0, &mut r));
    let (_, a) = p.offsets_and_weights(&mut s, x).unwrap();
    assert_eq!(s.tape.shape(a), [2, 16, 9]);
    for row in s.tape.data(a).chunks(9) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn attend_rejects_mismatched_pyramid() {
    let (store, p) = setup(4, 2);
    let mut s = Session::new(&store);
    let x = s.tape.constant(Tensor::zeros(&[1, 16, 4]));
    let bad = s.tape.constant(Tensor::zeros(&[1, 8, 8, 3]));
    let ok1 = s.tape.constant(Tensor::zeros(&[1, 4, 4, 4]));
    let ok2 = s.tape.constant(Tensor::zeros(&[1, 2, 2, 4]));
    let grid = TokenGrid { tokens: x, grid_h: 4, grid_w: 4 };
    let pyr = StructuralPyramid { levels: [bad, ok1, ok2], extents: EXTENTS };
    assert!(p.attend(&mut s, &grid, &pyr).is_err());
}

fn adapter(d: usize, depth: usize) -> (ParamStore, FfAdapter) {
    let mut store = ParamStore::new();
    let a = FfAdapter::new(&mut store, AdapterConfig::default(), depth, d, EXTENTS, 6).unwrap();
    (store, a)
}

fn random_pyramid(s: &mut Session, r: &mut ChaCha8Rng, n: usize, d: usize) -> StructuralPyramid {
    let levels = EXTENTS.map(|(h, w)| s.tape.constant(Tensor::uniform(&[n, h, w, d], -1.0, 1.0, r)));
    StructuralPyramid { levels, extents: EXTENTS }
}

#[test]
fn injection_and_evolution_are_identity_at_init() {
    let d = 8;
    let (store, a) = adapter(d, 3);
    let mut r = rng(7);
    let mut s = Session::new(&store);
    let x = Tensor::uniform(&[2, 16, d], -1.0, 1.0, &mut r);
    let xv = s.tape.constant(x.clone());
    let pyr = random_pyramid(&mut s, &mut r, 2, d);
    let grid = TokenGrid { tokens: xv, grid_h: 4, grid_w: 4 };
    let out = a.inject(&mut s, 0, &grid, &pyr).unwrap();
    assert!(s.tape.data(out.tokens) == x.data());
    for i in 1..3 {
        let e = a.evolve(&mut s, i, &pyr).unwrap();
        for l in 0..3 {
            assert_eq!(s.tape.shape(e.levels[l]), s.tape.shape(pyr.levels[l]));
            assert!(s.tape.data(e.levels[l]) == s.tape.data(pyr.levels[l]));
        }
    }
    assert!(a.evolve(&mut s, 0, &pyr).is_err());
    assert!(a.evolve(&mut s, 3, &pyr).is_err());
}

#[test]
fn injection_residual_is_sparse_attend() {
    let d = 6;
    let (mut store, a) = adapter(d, 2);
    let mut r = rng(8);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        set(&mut store, id, |_| r.random_range(-0.5..0.5));
    }
    let mut r = rng(9);
    let mut s = Session::new(&store);
    let xv = s.tape.constant(Tensor::uniform(&[1, 16, d], -1.0, 1.0, &mut r));
    let pyr = random_pyramid(&mut s, &mut r, 1, d);
    let grid = TokenGrid { tokens: xv, grid_h: 4, grid_w: 4 };
    let delta = a.sparse_attend(&mut s, 1, &grid, &pyr).unwrap();
    let out = a.inject(&mut s, 1, &grid, &pyr).unwrap();
    for i in 0..16 * d {
        assert_eq!(s.tape.data(out.tokens)[i], s.tape.data(xv)[i] + s.tape.data(delta)[i]);
    }
}

#[test]
fn stage_evolvers_are_distinct() {
    let d = 6;
    let mut store = ParamStore::new();
    let mut r = rng(10);
    let e1 = StageEvolver::new(&mut store, "e1", 1, d, 8, &mut r);
    let e2 = StageEvolver::new(&mut store, "e2", 2, d, 8, &mut r);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        set(&mut store, id, |_| r.random_range(-0.5..0.5));
    }
    let mut s = Session::new(&store);
    let p = random_pyramid(&mut s, &mut r, 1, d);
    let both = e1.forward(&mut s, &p).unwrap();
    let both = e2.forward(&mut s, &both).unwrap();
    let twice1 = e1.forward(&mut s, &p).unwrap();
    let twice1 = e1.forward(&mut s, &twice1).unwrap();
    let twice2 = e2.forward(&mut s, &p).unwrap();
    let twice2 = e2.forward(&mut s, &twice2).unwrap();
    let diff = |a: &StructuralPyramid, b: &StructuralPyramid, s: &Session| {
        (0..3).map(|l| s.tape.value(a.levels[l]).max_abs_diff(s.tape.value(b.levels[l]))).fold(0.0, f64::max)
    };
    assert!(diff(&both, &twice1, &s) > 1e-6);
    assert!(diff(&both, &twice2, &s) > 1e-6);
}

#[test]
fn every_adapter_parameter_receives_gradient() {
    let d = 6;
    let mut last = Vec::new();
    for attempt in 0..3u64 {
        let (mut store, a) = adapter(d, 2);
        let mut r = rng(11 + attempt);
        let ids: Vec<ParamId> = store.ids().collect();
        for &id in &ids {
            set(&mut store, id, |_| r.random_range(-0.5..0.5));
            store.get_mut(id).tensor.requires_grad = true;
        }
        let mut s = Session::new(&store);
        let xv = s.tape.constant(Tensor::uniform(&[2, 16, d], -1.0, 1.0, &mut r));
        let pyr = random_pyramid(&mut s, &mut r, 2, d);
        let grid = TokenGrid { tokens: xv, grid_h: 4, grid_w: 4 };
        let pyr1 = a.evolve(&mut s, 1, &pyr).unwrap();
        let y0 = a.inject(&mut s, 0, &grid, &pyr).unwrap();
        let y1 = a.inject(&mut s, 1, &y0, &pyr1).unwrap();
        let w = s.tape.constant(Tensor::uniform(&[2, 16, d], -1.0, 1.0, &mut r));
        let l = s.tape.mul(y1.tokens, w).unwrap();
        let l = s.tape.sum_all(l).unwrap();
        let g = s.backward(l).unwrap();
        last = ids.iter().filter(|&&id| g.get(id).is_none_or(|v| v.iter().all(|&x| x == 0.0))).map(|&id| store.get(id).name.clone()).collect();
        if last.is_empty() {
            return;
        }
    }
    panic!("parameters without gradient: {last:?}");
}
