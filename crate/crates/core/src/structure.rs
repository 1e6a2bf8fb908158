//! Edge-based structural priors from both modalities, fused per scale by
//! SSIM agreement with a max-gradient reference.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Conv, Init, Linear, ModuleKind, ParamStore, Session};
use crate::tensor::Tensor;

/// Added under the square root of the Sobel magnitude.
pub const SOBEL_EPS: f64 = 1e-6;
/// Floor for the SSIM dynamic range.
pub const RANGE_EPS: f64 = 1e-6;

pub const PYRAMID_KERNELS: [usize; 3] = [3, 5, 7];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: 7, k1: 0.01, k2: 0.03 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Channels after the stem.
    pub stem_channels: usize,
    /// Channels of each pyramid level before projection.
    pub level_channels: usize,
    pub ssim: SsimParams,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { stem_channels: 8, level_channels: 8, ssim: SsimParams::default() }
    }
}

/// Three fused levels at 1/8, 1/16 and 1/32 of the input, channel-last
/// `[N, h, w, D]`.
#[derive(Clone, Copy, Debug)]
pub struct StructuralPyramid {
    pub levels: [Var; 3],
    /// `(h, w)` of each level.
    pub extents: [(usize, usize); 3],
}

/// Per-level gating diagnostics, each `[N,1,h,w]`.
#[derive(Clone, Copy, Debug)]
pub struct AlignmentWeights {
    pub grad_v: Var,
    pub grad_t: Var,
    pub grad_ref: Var,
    /// Raw similarity maps in `[-1, 1]`.
    pub m_v: Var,
    pub m_t: Var,
}

fn check_nchw(tape: &Tape, x: Var, what: &str) -> Result<[usize; 4]> {
    let s = tape.shape(x);
    if s.len() != 4 {
        return Err(Error::Dimension(format!("{what} must be [N,C,H,W], got {s:?}")));
    }
    Ok([s[0], s[1], s[2], s[3]])
}

fn same_shape(tape: &Tape, a: Var, b: Var, what: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::Dimension(format!("{what}: {:?} vs {:?}", tape.shape(a), tape.shape(b))));
    }
    Ok(())
}

/// Per-channel Sobel magnitude `sqrt(Gx² + Gy² + eps)` with replicated
/// borders, averaged over channels: `[N,C,h,w] -> [N,1,h,w]`.
pub fn sobel_magnitude(tape: &mut Tape, f: Var) -> Result<Var> {
    let [n, c, h, w] = check_nchw(tape, f, "sobel input")?;
    let kernel = Tensor::new(
        vec![2, 1, 3, 3],
        vec![
            -1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0, //
            -1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0,
        ],
    )?;
    let kernel = tape.constant(kernel);
    let x = tape.reshape(f, &[n * c, 1, h, w])?;
    let x = tape.pad_replicate2d(x, 1)?;
    let g = tape.conv2d(x, kernel, 1, 0)?;
    let g = tape.square(g)?;
    let g = tape.sum(g, 1)?;
    let g = tape.add_scalar(g, SOBEL_EPS)?;
    let g = tape.sqrt(g)?;
    let g = tape.reshape(g, &[n, c, h, w])?;
    let g = tape.mean(g, 1)?;
    tape.reshape(g, &[n, 1, h, w])
}

pub fn reference_map(tape: &mut Tape, grad_v: Var, grad_t: Var) -> Result<Var> {
    same_shape(tape, grad_v, grad_t, "reference_map")?;
    tape.max_elementwise(grad_v, grad_t)
}

/// Mean over a `window × window` box with replicated borders, `[N,1,h,w]`.
fn box_mean(tape: &mut Tape, x: Var, window: usize) -> Result<Var> {
    let area = (window * window) as f64;
    let k = tape.constant(Tensor::full(&[1, 1, window, window], 1.0 / area));
    let p = tape.pad_replicate2d(x, window / 2)?;
    tape.conv2d(p, k, 1, 0)
}

/// Local SSIM between a modality's gradient map and the reference map.
/// The dynamic range is taken over the whole batch of `grad_ref`.
pub fn ssim_alignment(tape: &mut Tape, grad_m: Var, grad_ref: Var, params: SsimParams) -> Result<Var> {
    same_shape(tape, grad_m, grad_ref, "ssim_alignment")?;
    let [_, c, _, _] = check_nchw(tape, grad_m, "ssim input")?;
    if c != 1 {
        return Err(Error::Dimension(format!("ssim_alignment expects one channel, got {c}")));
    }
    if params.window.is_multiple_of(2) {
        return Err(Error::Config(format!("SSIM window must be odd, got {}", params.window)));
    }
    let hi = tape.max_all(grad_ref)?;
    let lo = tape.min_all(grad_ref)?;
    let mut range = tape.sub(hi, lo)?;
    if tape.data(range)[0] < RANGE_EPS {
        range = tape.constant(Tensor::from_vec(vec![RANGE_EPS]));
    }
    let range_sq = tape.square(range)?;
    let xi1 = tape.scale(range_sq, params.k1 * params.k1)?;
    let xi2 = tape.scale(range_sq, params.k2 * params.k2)?;

    let w = params.window;
    let mu_x = box_mean(tape, grad_m, w)?;
    let mu_y = box_mean(tape, grad_ref, w)?;
    let xx = tape.mul(grad_m, grad_m)?;
    let yy = tape.mul(grad_ref, grad_ref)?;
    let xy = tape.mul(grad_m, grad_ref)?;
    let exx = box_mean(tape, xx, w)?;
    let eyy = box_mean(tape, yy, w)?;
    let exy = box_mean(tape, xy, w)?;
    let mu_xx = tape.mul(mu_x, mu_x)?;
    let mu_yy = tape.mul(mu_y, mu_y)?;
    let mu_xy = tape.mul(mu_x, mu_y)?;
    let var_x = tape.sub(exx, mu_xx)?;
    let var_y = tape.sub(eyy, mu_yy)?;
    let cov = tape.sub(exy, mu_xy)?;

    let two_mu = tape.scale(mu_xy, 2.0)?;
    let l_num = tape.add(two_mu, xi1)?;
    let two_cov = tape.scale(cov, 2.0)?;
    let c_num = tape.add(two_cov, xi2)?;
    let mu_sum = tape.add(mu_xx, mu_yy)?;
    let l_den = tape.add(mu_sum, xi1)?;
    let var_sum = tape.add(var_x, var_y)?;
    let c_den = tape.add(var_sum, xi2)?;
    let num = tape.mul(l_num, c_num)?;
    let den = tape.mul(l_den, c_den)?;
    tape.div(num, den)
}

/// `σ(M_v)·F_v + σ(M_t)·F_t`, gates broadcast over channels.
pub fn fuse_level(tape: &mut Tape, f_v: Var, f_t: Var, m_v: Var, m_t: Var) -> Result<Var> {
    same_shape(tape, f_v, f_t, "fuse_level features")?;
    same_shape(tape, m_v, m_t, "fuse_level gates")?;
    let [n, _, h, w] = check_nchw(tape, f_v, "fuse_level features")?;
    if tape.shape(m_v) != [n, 1, h, w] {
        return Err(Error::Dimension(format!("gate {:?} does not broadcast over {:?}", tape.shape(m_v), tape.shape(f_v))));
    }
    let gv = tape.sigmoid(m_v)?;
    let gt = tape.sigmoid(m_t)?;
    let a = tape.mul(gv, f_v)?;
    let b = tape.mul(gt, f_t)?;
    tape.add(a, b)
}

#[derive(Clone, Debug)]
pub struct StructureEncoder {
    pub config: EncoderConfig,
    stem: [Conv; 2],
    levels: [Conv; 3],
    projections: [Linear; 3],
}

impl StructureEncoder {
    pub fn new(store: &mut ParamStore, config: EncoderConfig, width: usize, seed: u64) -> Result<Self> {
        if config.stem_channels == 0 || config.level_channels == 0 || width == 0 {
            return Err(Error::Config("encoder channel counts must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = ModuleKind::StructureEncoder;
        let cs = config.stem_channels;
        let cl = config.level_channels;
        let stem = [Conv::new(store, "encoder.stem0", m, 0, 3, cs, 3, 2, &mut rng), Conv::new(store, "encoder.stem1", m, 0, cs, cs, 3, 2, &mut rng)];
        let levels = [
            Conv::new(store, "encoder.level1", m, 0, cs, cl, PYRAMID_KERNELS[0], 2, &mut rng),
            Conv::new(store, "encoder.level2", m, 0, cl, cl, PYRAMID_KERNELS[1], 2, &mut rng),
            Conv::new(store, "encoder.level3", m, 0, cl, cl, PYRAMID_KERNELS[2], 2, &mut rng),
        ];
        let projections = [1, 2, 3].map(|l| Linear::new(store, &format!("encoder.project{l}"), m, 0, cl, width, Init::LeCun, &mut rng));
        Ok(Self { config, stem, levels, projections })
    }

    pub fn projections(&self) -> &[Linear; 3] {
        &self.projections
    }

    pub fn stem_convs(&self) -> &[Conv; 2] {
        &self.stem
    }

    pub fn level_convs(&self) -> &[Conv; 3] {
        &self.levels
    }

    /// Shared-weight stem. The thermal channel is replicated to three.
    pub fn stem(&self, s: &mut Session, visible: Var, thermal: Var) -> Result<(Var, Var)> {
        let [n, cv, h, w] = check_nchw(&s.tape, visible, "visible")?;
        let [nt, ct, ht, wt] = check_nchw(&s.tape, thermal, "thermal")?;
        if cv != 3 || ct != 1 || (n, h, w) != (nt, ht, wt) {
            return Err(Error::Dimension(format!(
                "stem expects aligned [N,3,H,W] and [N,1,H,W], got {:?} and {:?}",
                [n, cv, h, w],
                [nt, ct, ht, wt]
            )));
        }
        let plane = h * w;
        let index = (0..n).flat_map(|b| (0..3).flat_map(move |_| (0..plane).map(move |i| b * plane + i))).collect();
        let thermal3 = s.tape.gather(thermal, index, vec![n, 3, h, w])?;
        let both = s.tape.concat(&[visible, thermal3], 0)?;
        let mut x = both;
        for conv in &self.stem {
            x = conv.forward(s, x)?;
            x = s.tape.gelu(x)?;
        }
        let f_v = s.tape.narrow(x, 0, 0, n)?;
        let f_t = s.tape.narrow(x, 0, n, n)?;
        Ok((f_v, f_t))
    }

    /// Three sequential stride-2 stages, each halving the extent.
    pub fn pyramid(&self, s: &mut Session, f: Var) -> Result<[Var; 3]> {
        let [_, _, h, w] = check_nchw(&s.tape, f, "pyramid input")?;
        if h < 4 || w < 4 {
            return Err(Error::Dimension(format!("pyramid input {h}x{w} too small for three halvings")));
        }
        let mut x = f;
        let mut out = [f; 3];
        for (slot, conv) in out.iter_mut().zip(&self.levels) {
            x = conv.forward(s, x)?;
            x = s.tape.gelu(x)?;
            *slot = x;
        }
        Ok(out)
    }

    /// 1×1 projection of `[N,Cl,h,w]` to width D, returned channel-last
    /// `[N,h,w,D]`.
    pub fn project(&self, s: &mut Session, level: usize, f: Var) -> Result<Var> {
        let proj = self.projections.get(level).ok_or_else(|| Error::Config(format!("no pyramid level {level}")))?;
        check_nchw(&s.tape, f, "projection input")?;
        let x = s.tape.permute(f, &[0, 2, 3, 1])?;
        proj.forward(s, x)
    }

    /// Full encoder: stem, pyramid, structural alignment and projection.
    pub fn encode(&self, s: &mut Session, visible: Var, thermal: Var) -> Result<(StructuralPyramid, [AlignmentWeights; 3])> {
        let (f_v, f_t) = self.stem(s, visible, thermal)?;
        let pv = self.pyramid(s, f_v)?;
        let pt = self.pyramid(s, f_t)?;
        let mut levels = [visible; 3];
        let mut extents = [(0, 0); 3];
        let mut diags = Vec::with_capacity(3);
        for l in 0..3 {
            let d = align(&mut s.tape, pv[l], pt[l], self.config.ssim)?;
            let fused = fuse_level(&mut s.tape, pv[l], pt[l], d.m_v, d.m_t)?;
            let shape = s.tape.shape(fused);
            extents[l] = (shape[2], shape[3]);
            levels[l] = self.project(s, l, fused)?;
            diags.push(d);
        }
        let diags: [AlignmentWeights; 3] = diags.try_into().expect("three levels");
        Ok((StructuralPyramid { levels, extents }, diags))
    }
}

/// Sobel maps, reference map and SSIM alignment of one level's features.
pub fn align(tape: &mut Tape, f_v: Var, f_t: Var, params: SsimParams) -> Result<AlignmentWeights> {
    same_shape(tape, f_v, f_t, "align")?;
    let grad_v = sobel_magnitude(tape, f_v)?;
    let grad_t = sobel_magnitude(tape, f_t)?;
    let grad_ref = reference_map(tape, grad_v, grad_t)?;
    let m_v = ssim_alignment(tape, grad_v, grad_ref, params)?;
    let m_t = ssim_alignment(tape, grad_t, grad_ref, params)?;
    Ok(AlignmentWeights { grad_v, grad_t, grad_ref, m_v, m_t })
}

/// Single-channel maps of every pyramid level for one image pair, named
/// `level{1,2,3}_<map>`, each `[h, w]`: Sobel magnitudes, reference map,
/// raw similarities and the sigmoid gates.
pub fn structure_maps(encoder: &StructureEncoder, store: &ParamStore, visible: &Tensor, thermal: &Tensor) -> Result<Vec<(String, Tensor)>> {
    let mut s = Session::new(store);
    let v = s.tape.constant(visible.clone());
    let t = s.tape.constant(thermal.clone());
    let (_, diags) = encoder.encode(&mut s, v, t)?;
    let mut out = Vec::new();
    for (l, d) in diags.iter().enumerate() {
        let gate_v = s.tape.sigmoid(d.m_v)?;
        let gate_t = s.tape.sigmoid(d.m_t)?;
        for (name, var) in [
            ("grad_v", d.grad_v),
            ("grad_t", d.grad_t),
            ("grad_ref", d.grad_ref),
            ("m_v", d.m_v),
            ("m_t", d.m_t),
            ("gate_v", gate_v),
            ("gate_t", gate_t),
        ] {
            let shape = s.tape.shape(var).to_vec();
            let (h, w) = (shape[2], shape[3]);
            // first sample of the batch
            let data = s.tape.data(var)[..h * w].to_vec();
            out.push((format!("level{}_{name}", l + 1), Tensor::new(vec![h, w], data)?));
        }
    }
    Ok(out)
}
