//! Residual sparse-attention injection of the structural pyramid into the
//! token stream, plus per-stage evolution of the pyramid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::backbone::{reference_point, TokenGrid};
use crate::error::{Error, Result};
use crate::params::{Init, Linear, ModuleKind, ParamId, ParamStore, Session};
use crate::structure::StructuralPyramid;
use crate::tensor::Tensor;

/// How predicted offsets are interpreted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffsetUnits {
    /// Offsets are in pixels of the sampled level.
    #[default]
    Pixel,
    /// Offsets are in normalized units, scaled per level by a learnable
    /// factor initialized to `2 / extent`.
    Normalized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    /// Sampling points per level.
    pub points: usize,
    pub evolver_hidden: usize,
    pub offset_units: OffsetUnits,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { points: 4, evolver_hidden: 16, offset_units: OffsetUnits::Pixel }
    }
}

/// Normalized `(x, y)` to pixel coordinates of a level with extent `(h, w)`,
/// pixel centres at integers.
pub fn phi_map(p: (f64, f64), extent: (usize, usize)) -> (f64, f64) {
    (p.0 * extent.1 as f64 - 0.5, p.1 * extent.0 as f64 - 0.5)
}

#[derive(Clone, Debug)]
pub struct SparseAttentionParams {
    pub offset_head: Linear,
    pub weight_head: Linear,
    pub value_proj: Linear,
    /// Scalar output gate, zero at init.
    pub gate: ParamId,
    pub level_scale: Option<[ParamId; 3]>,
    pub points: usize,
    pub units: OffsetUnits,
}

impl SparseAttentionParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: rand::Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        depth: usize,
        width: usize,
        points: usize,
        units: OffsetUnits,
        extents: [(usize, usize); 3],
        rng: &mut R,
    ) -> Self {
        let m = ModuleKind::FfAdapter;
        let offset_head = Linear::new(store, &format!("{name}.offset"), m, depth, width, 3 * points * 2, Init::Zeros, rng);
        let weight_head = Linear::new(store, &format!("{name}.weight"), m, depth, width, 3 * points, Init::Zeros, rng);
        let value_proj = Linear::new(store, &format!("{name}.value"), m, depth, width, width, Init::LeCun, rng);
        let gate = store.add(format!("{name}.gate"), m, depth, Tensor::zeros(&[1]));
        let level_scale = match units {
            OffsetUnits::Pixel => None,
            OffsetUnits::Normalized => Some([0, 1, 2].map(|l| {
                let extent = extents[l].0.max(extents[l].1) as f64;
                store.add(format!("{name}.scale{}", l + 1), m, depth, Tensor::from_vec(vec![2.0 / extent]))
            })),
        };
        Self { offset_head, weight_head, value_proj, gate, level_scale, points, units }
    }

    /// Sampling offsets `[N,T,3,K,2]` and joint softmax weights `[N,T,3K]`.
    pub fn offsets_and_weights(&self, s: &mut Session, tokens: Var) -> Result<(Var, Var)> {
        let off = self.offset_head.forward(s, tokens)?;
        let logits = self.weight_head.forward(s, tokens)?;
        let attn = s.tape.softmax(logits, 2)?;
        Ok((off, attn))
    }

    /// `Σ_l Σ_k A_lqk · W_v · sample_l(p_q + Δp_lk)` for every query token,
    /// scaled by the output gate.
    pub fn attend(&self, s: &mut Session, tokens: &TokenGrid, pyramid: &StructuralPyramid) -> Result<Var> {
        let x = tokens.tokens;
        let shape = s.tape.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(Error::Dimension(format!("tokens must be [N,T,D], got {shape:?}")));
        }
        let (n, t, d) = (shape[0], shape[1], shape[2]);
        for (l, &lv) in pyramid.levels.iter().enumerate() {
            let (h, w) = pyramid.extents[l];
            if s.tape.shape(lv) != [n, h, w, d] {
                return Err(Error::Dimension(format!("pyramid level {} is {:?}, expected {:?}", l + 1, s.tape.shape(lv), [n, h, w, d])));
            }
        }
        let k = self.points;
        let (off, attn) = self.offsets_and_weights(s, x)?;
        let refs: Vec<f64> = (0..t)
            .flat_map(|q| {
                let (px, py) = reference_point(q, tokens.grid_h, tokens.grid_w);
                [px, py]
            })
            .collect();
        let refs = s.tape.constant(Tensor::new(vec![t, 1, 2], refs)?);
        let mut acc: Option<Var> = None;
        for l in 0..3 {
            let (h, w) = pyramid.extents[l];
            let o = s.tape.narrow(off, 2, l * 2 * k, 2 * k)?;
            let o = s.tape.reshape(o, &[n, t, k, 2])?;
            let o = match (self.units, self.level_scale) {
                (OffsetUnits::Normalized, Some(scales)) => {
                    let sc = s.param(scales[l]);
                    s.tape.mul(o, sc)?
                }
                _ => {
                    let per_pixel = s.tape.constant(Tensor::from_vec(vec![1.0 / w as f64, 1.0 / h as f64]));
                    s.tape.mul(o, per_pixel)?
                }
            };
            let pts = s.tape.add(o, refs)?;
            let pts = s.tape.reshape(pts, &[n, t * k, 2])?;
            let samples = s.tape.bilinear(pyramid.levels[l], pts)?;
            let a = s.tape.narrow(attn, 2, l * k, k)?;
            let a = s.tape.reshape(a, &[n, t * k, 1])?;
            let weighted = s.tape.mul(samples, a)?;
            let weighted = s.tape.reshape(weighted, &[n, t, k, d])?;
            let summed = s.tape.sum(weighted, 2)?;
            acc = Some(match acc {
                None => summed,
                Some(prev) => s.tape.add(prev, summed)?,
            });
        }
        let agg = acc.expect("three levels");
        // The weights sum to one, so projecting after aggregation equals
        // projecting every sample.
        let out = self.value_proj.forward(s, agg)?;
        let gate = s.param(self.gate);
        s.tape.mul(out, gate)
    }
}

/// Token-wise residual MLP over all pyramid levels of one stage.
#[derive(Clone, Debug)]
pub struct StageEvolver {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl StageEvolver {
    pub fn new<R: rand::Rng + ?Sized>(store: &mut ParamStore, name: &str, depth: usize, width: usize, hidden: usize, rng: &mut R) -> Self {
        let m = ModuleKind::FfAdapter;
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), m, depth, width, hidden, Init::LeCun, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), m, depth, hidden, width, Init::Zeros, rng),
        }
    }

    pub fn forward(&self, s: &mut Session, pyramid: &StructuralPyramid) -> Result<StructuralPyramid> {
        let shape0 = s.tape.shape(pyramid.levels[0]).to_vec();
        let (n, d) = (shape0[0], shape0[3]);
        let mut flat = Vec::with_capacity(3);
        let mut sizes = [0; 3];
        for (l, &lv) in pyramid.levels.iter().enumerate() {
            let (h, w) = pyramid.extents[l];
            sizes[l] = h * w;
            flat.push(s.tape.reshape(lv, &[n, h * w, d])?);
        }
        let x = s.tape.concat(&flat, 1)?;
        let hdn = self.fc1.forward(s, x)?;
        let hdn = s.tape.gelu(hdn)?;
        let upd = self.fc2.forward(s, hdn)?;
        let y = s.tape.add(x, upd)?;
        let mut levels = pyramid.levels;
        let mut start = 0;
        for l in 0..3 {
            let (h, w) = pyramid.extents[l];
            let part = s.tape.narrow(y, 1, start, sizes[l])?;
            levels[l] = s.tape.reshape(part, &[n, h, w, d])?;
            start += sizes[l];
        }
        Ok(StructuralPyramid { levels, extents: pyramid.extents })
    }
}

/// One attention module per backbone block and one evolver between
/// consecutive blocks.
#[derive(Clone, Debug)]
pub struct FfAdapter {
    pub config: AdapterConfig,
    pub attention: Vec<SparseAttentionParams>,
    pub evolvers: Vec<StageEvolver>,
}

impl FfAdapter {
    /// Block `i` modules sit at stage depth `i + 1`.
    pub fn new(store: &mut ParamStore, config: AdapterConfig, depth: usize, width: usize, extents: [(usize, usize); 3], seed: u64) -> Result<Self> {
        if config.points == 0 || config.evolver_hidden == 0 {
            return Err(Error::Config("adapter points and evolver width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let attention = (0..depth)
            .map(|i| {
                SparseAttentionParams::new(store, &format!("adapter.attn{i}"), i + 1, width, config.points, config.offset_units, extents, &mut rng)
            })
            .collect();
        let evolvers =
            (1..depth).map(|i| StageEvolver::new(store, &format!("adapter.evolve{i}"), i + 1, width, config.evolver_hidden, &mut rng)).collect();
        Ok(Self { config, attention, evolvers })
    }

    pub fn sparse_attend(&self, s: &mut Session, i: usize, tokens: &TokenGrid, pyramid: &StructuralPyramid) -> Result<Var> {
        let p = self.attention.get(i).ok_or_else(|| Error::Config(format!("no adapter for block {i}")))?;
        p.attend(s, tokens, pyramid)
    }

    /// Tokens plus the sparse-attention read-out of the pyramid.
    pub fn inject(&self, s: &mut Session, i: usize, tokens: &TokenGrid, pyramid: &StructuralPyramid) -> Result<TokenGrid> {
        let delta = self.sparse_attend(s, i, tokens, pyramid)?;
        let out = s.tape.add(tokens.tokens, delta)?;
        Ok(TokenGrid { tokens: out, ..*tokens })
    }

    /// Pyramid for stage `i` (1 ≤ i < depth) from that of stage `i - 1`.
    pub fn evolve(&self, s: &mut Session, i: usize, pyramid: &StructuralPyramid) -> Result<StructuralPyramid> {
        let e = i.checked_sub(1).and_then(|j| self.evolvers.get(j)).ok_or_else(|| Error::Config(format!("no evolver for stage {i}")))?;
        e.forward(s, pyramid)
    }
}
