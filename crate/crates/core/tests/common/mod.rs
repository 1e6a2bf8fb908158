//! Brute-force oracles shared by the integration suites and the acceptance
//! runner.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slgnet::adapter::{OffsetUnits, SparseAttentionParams};
use slgnet::backbone::TokenGrid;
use slgnet::structure::{align, SsimParams, StructuralPyramid};
use slgnet::{ParamStore, Session, Tape, Tensor};

/// SSIM from explicit per-window loops with clamped (replicated) borders.
/// The dynamic range is that of `y` over the whole batch.
pub fn ssim_ref(x: &Tensor, y: &Tensor, p: SsimParams) -> Vec<f64> {
    let [n, _, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let hi = y.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = y.data().iter().copied().fold(f64::INFINITY, f64::min);
    let range = (hi - lo).max(1e-6);
    let (c1, c2) = ((p.k1 * range).powi(2), (p.k2 * range).powi(2));
    let r = (p.window / 2) as isize;
    let mut out = Vec::new();
    for b in 0..n {
        for i in 0..h as isize {
            for j in 0..w as isize {
                let mut xs = Vec::new();
                let mut ys = Vec::new();
                for di in -r..=r {
                    for dj in -r..=r {
                        let ii = (i + di).clamp(0, h as isize - 1) as usize;
                        let jj = (j + dj).clamp(0, w as isize - 1) as usize;
                        xs.push(x.at(&[b, 0, ii, jj]));
                        ys.push(y.at(&[b, 0, ii, jj]));
                    }
                }
                let m = xs.len() as f64;
                let mx = xs.iter().sum::<f64>() / m;
                let my = ys.iter().sum::<f64>() / m;
                let vx = xs.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / m;
                let vy = ys.iter().map(|v| (v - my).powi(2)).sum::<f64>() / m;
                let cov = xs.iter().zip(&ys).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / m;
                out.push((2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2)));
            }
        }
    }
    out
}

/// Bilinear lookup on a channel-last `[h, w, c]` slice at pixel coordinates,
/// clamped to the grid.
fn sample(map: &[f64], h: usize, w: usize, c: usize, px: f64, py: f64) -> Vec<f64> {
    let x = px.clamp(0.0, (w - 1) as f64);
    let y = py.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    (0..c)
        .map(|ch| {
            let at = |yy: usize, xx: usize| map[(yy * w + xx) * c + ch];
            (1.0 - fx) * (1.0 - fy) * at(y0, x0) + fx * (1.0 - fy) * at(y0, x1) + (1.0 - fx) * fy * at(y1, x0) + fx * fy * at(y1, x1)
        })
        .collect()
}

fn affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    (0..dout).map(|o| b.data()[o] + (0..din).map(|i| x[i] * w.data()[i * dout + o]).sum::<f64>()).collect()
}

/// Sparse attention computed one (sample, query, level, point) at a time.
pub fn sparse_attention_oracle(store: &ParamStore, p: &SparseAttentionParams, tokens: &Tensor, grid: (usize, usize), levels: &[Tensor; 3]) -> Tensor {
    let [n, t, d] = [tokens.shape()[0], tokens.shape()[1], tokens.shape()[2]];
    let k = p.points;
    let get = |id| &store.get(id).tensor;
    let (wo, bo) = (get(p.offset_head.weight), get(p.offset_head.bias.unwrap()));
    let (wa, ba) = (get(p.weight_head.weight), get(p.weight_head.bias.unwrap()));
    let (wv, bv) = (get(p.value_proj.weight), get(p.value_proj.bias.unwrap()));
    let gate = get(p.gate).data()[0];
    let mut out = vec![0.0; n * t * d];
    for b in 0..n {
        for q in 0..t {
            let x = &tokens.data()[(b * t + q) * d..(b * t + q + 1) * d];
            let off = affine(x, wo, bo);
            let logits = affine(x, wa, ba);
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            let (gh, gw) = grid;
            let (rx, ry) = (((q % gw) as f64 + 0.5) / gw as f64, ((q / gw) as f64 + 0.5) / gh as f64);
            let mut agg = vec![0.0; d];
            for (l, level) in levels.iter().enumerate() {
                let (h, w) = (level.shape()[1], level.shape()[2]);
                let map = &level.data()[b * h * w * d..(b + 1) * h * w * d];
                for kk in 0..k {
                    let a = (logits[l * k + kk] - mx).exp() / z;
                    let (dx, dy) = (off[(l * k + kk) * 2], off[(l * k + kk) * 2 + 1]);
                    let (sx, sy) = match p.units {
                        OffsetUnits::Pixel => (dx / w as f64, dy / h as f64),
                        OffsetUnits::Normalized => {
                            let s = store.get(p.level_scale.unwrap()[l]).tensor.data()[0];
                            (dx * s, dy * s)
                        }
                    };
                    let px = (rx + sx) * w as f64 - 0.5;
                    let py = (ry + sy) * h as f64 - 0.5;
                    let v = sample(map, h, w, d, px, py);
                    let v = affine(&v, wv, bv);
                    for c in 0..d {
                        agg[c] += a * v[c];
                    }
                }
            }
            for c in 0..d {
                out[(b * t + q) * d + c] = gate * agg[c];
            }
        }
    }
    Tensor::new(vec![n, t, d], out).unwrap()
}

/// One random instance of the sparse-attention oracle comparison; returns
/// the largest absolute difference.
pub fn sparse_attention_trial(seed: u64, units: OffsetUnits) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let gh = r.random_range(1..=4);
    let gw = r.random_range(1..=4);
    let t = gh * gw;
    let k = r.random_range(1..=4);
    let d = r.random_range(2..=6);
    let n = r.random_range(1..=2);
    let extents = [
        (r.random_range(3..=7), r.random_range(3..=7)),
        (r.random_range(2..=4), r.random_range(2..=4)),
        (r.random_range(1..=2), r.random_range(1..=2)),
    ];
    let mut store = ParamStore::new();
    let p = SparseAttentionParams::new(&mut store, "attn", 1, d, k, units, extents, &mut r);
    for (_, prm) in store.iter_mut() {
        for v in prm.tensor.data_mut() {
            *v += r.random_range(-1.0..1.0);
        }
    }
    let tokens = Tensor::uniform(&[n, t, d], -1.0, 1.0, &mut r);
    let levels = extents.map(|(h, w)| Tensor::uniform(&[n, h, w, d], -1.0, 1.0, &mut r));
    let expect = sparse_attention_oracle(&store, &p, &tokens, (gh, gw), &levels);
    let mut s = Session::new(&store);
    let x = s.tape.constant(tokens);
    let lv = levels.clone().map(|l| s.tape.constant(l));
    let grid = TokenGrid { tokens: x, grid_h: gh, grid_w: gw };
    let pyr = StructuralPyramid { levels: lv, extents };
    let got = p.attend(&mut s, &grid, &pyr).unwrap();
    s.tape.value(got).max_abs_diff(&expect)
}

/// One structural-dominance trial: modality A carries piecewise-constant
/// structure, B is low-amplitude noise. Returns mean gates (A, B).
pub fn dominance_trial(r: &mut ChaCha8Rng) -> (f64, f64) {
    let (c, h, w) = (4, 12, 12);
    let mut edges = Tensor::zeros(&[1, c, h, w]);
    for ch in 0..c {
        let (x0, y0) = (r.random_range(1..6), r.random_range(1..6));
        let (x1, y1) = (r.random_range(x0 + 3..w), r.random_range(y0 + 3..h));
        let level = r.random_range(0.5..1.5);
        for y in y0..y1 {
            for x in x0..x1 {
                edges.data_mut()[(ch * h + y) * w + x] = level;
            }
        }
    }
    let noise = Tensor::randn(&[1, c, h, w], 0.05, r);
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(edges), tape.constant(noise));
    let d = align(&mut tape, a, b, SsimParams::default()).unwrap();
    let ga = tape.sigmoid(d.m_v).unwrap();
    let gb = tape.sigmoid(d.m_t).unwrap();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    (mean(tape.data(ga)), mean(tape.data(gb)))
}

/// Average precision by sweeping every distinct score as a threshold:
/// `Σ (R_i − R_{i−1}) · P_i` over thresholds in decreasing order.
pub fn ap_sweep(scores: &[f64], labels: &[f64]) -> f64 {
    let pos = labels.iter().filter(|&&l| l > 0.5).count() as f64;
    if pos == 0.0 {
        return 0.0;
    }
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for th in thresholds {
        let (mut tp, mut fp) = (0.0, 0.0);
        for (s, l) in scores.iter().zip(labels) {
            if *s >= th {
                if *l > 0.5 {
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
            }
        }
        let recall = tp / pos;
        ap += (recall - prev_recall) * tp / (tp + fp);
        prev_recall = recall;
    }
    ap
}
