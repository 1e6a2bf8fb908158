//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::model::{BatchInputs, Pathways, SlgNet};
use crate::params::{ModuleKind, ParamId, ParamStore, Session};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const MAX_REL_ERROR: f64 = 1e-4;
pub const MAX_CHECKED: usize = 200;
/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-6;

pub const SCOPES: [&str; 6] = ["tensor_autodiff", "frozen_backbone", "structure_encoder", "ff_adapter", "lgm", "harness"];

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleGradReport {
    pub module: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter entry with the largest error, as `name[index]`.
    pub worst: String,
    /// Entries at or above the threshold.
    pub offenders: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub seed: u64,
    pub threshold: f64,
    pub modules: Vec<ModuleGradReport>,
    pub passed: bool,
}

impl GradReport {
    pub fn into_result(self) -> Result<Self> {
        if self.passed {
            return Ok(self);
        }
        let bad: Vec<String> =
            self.modules.iter().filter(|m| !m.offenders.is_empty()).map(|m| format!("{}: {}", m.module, m.offenders.join(", "))).collect();
        Err(Error::GradCheck(bad.join("; ")))
    }
}

/// Checks up to [`MAX_CHECKED`] randomly chosen scalar entries of `params`
/// for the scalar `loss` built by `f`.
pub fn check_params<F>(store: &mut ParamStore, params: &[ParamId], label: &str, rng: &mut ChaCha8Rng, f: F) -> Result<ModuleGradReport>
where
    F: Fn(&mut Session) -> Result<Var>,
{
    for &id in params {
        store.get_mut(id).tensor.requires_grad = true;
    }
    let grads = {
        let mut s = Session::new(store);
        let loss = f(&mut s)?;
        s.backward(loss)?
    };
    let slots: Vec<(ParamId, usize)> = params.iter().flat_map(|&id| (0..store.get(id).tensor.len()).map(move |i| (id, i))).collect();
    let chosen = sample(rng, slots.len(), slots.len().min(MAX_CHECKED)).into_vec();
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut s = Session::new(store);
        let loss = f(&mut s)?;
        Ok(s.tape.data(loss)[0])
    };
    let mut report = ModuleGradReport { module: label.to_string(), checked: 0, max_rel_error: 0.0, worst: String::new(), offenders: Vec::new() };
    for c in chosen {
        let (id, i) = slots[c];
        let analytic = grads.get(id).map_or(0.0, |g| g[i]);
        let orig = store.get(id).tensor.data()[i];
        store.get_mut(id).tensor.data_mut()[i] = orig + FD_STEP;
        let up = eval(store)?;
        store.get_mut(id).tensor.data_mut()[i] = orig - FD_STEP;
        let down = eval(store)?;
        store.get_mut(id).tensor.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let err = relative_error(analytic, numeric);
        let name = format!("{}[{i}]", store.get(id).name);
        if err >= MAX_REL_ERROR {
            report.offenders.push(format!("{name} (analytic {analytic:.6e}, numeric {numeric:.6e})"));
        }
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = name;
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Small network used for checking: every pathway active, few channels.
pub fn check_config() -> RunConfig {
    RunConfig {
        image_size: 64,
        patch_size: 16,
        depth: 2,
        width: 16,
        heads: 2,
        mlp_ratio: 2,
        stem_channels: 4,
        level_channels: 4,
        sampling_points: 2,
        evolver_hidden: 8,
        embed_dim: 8,
        seq_len: 6,
        ..RunConfig::default()
    }
}

/// Moves every parameter away from its structured initialization so that
/// zero-initialized heads and gates carry gradient, and sampling points sit
/// off the pixel grid.
fn perturb(model: &mut SlgNet, rng: &mut ChaCha8Rng) {
    for (_, p) in model.store.iter_mut() {
        let offset_bias = p.name.ends_with(".offset.bias");
        for v in p.tensor.data_mut() {
            *v += if offset_bias { rng.random_range(-1.5..1.5) } else { 0.1 * rng.random_range(-1.0..1.0) };
        }
    }
}

fn random_batch(model: &SlgNet, rng: &mut ChaCha8Rng, n: usize) -> Result<(BatchInputs, Vec<f64>)> {
    let c = &model.config;
    let s = c.backbone.image_size;
    let l = c.lgm.seq_len;
    let d = c.lgm.embed_dim;
    let inputs = BatchInputs {
        visible: Tensor::uniform(&[n, 3, s, s], 0.0, 1.0, rng),
        thermal: Tensor::uniform(&[n, 1, s, s], 0.0, 1.0, rng),
        captions: Some(std::array::from_fn(|_| Tensor::uniform(&[n, l, d], -0.5, 0.5, rng))),
    };
    let targets = (0..n * c.backbone.tokens()).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
    Ok((inputs, targets))
}

/// A composite of the primitive ops on free tensors.
fn primitive_graph(s: &mut Session, ids: &[ParamId]) -> Result<Var> {
    let [img, kernel, w, pts] = [ids[0], ids[1], ids[2], ids[3]].map(|id| s.param(id));
    let t = &mut s.tape;
    let c = t.conv2d(img, kernel, 1, 1)?;
    let c = t.gelu(c)?;
    let sm = t.softmax(c, 3)?;
    let sg = t.sigmoid(c)?;
    let mx = t.max_elementwise(sm, sg)?;
    let ln = t.layer_norm(mx, 1e-6)?;
    let r = t.reshape(ln, &[1, 3, 6, 6])?;
    let r = t.permute(r, &[0, 2, 3, 1])?;
    let b = t.bilinear(r, pts)?;
    let m = t.matmul(b, w)?;
    let v = t.variance(m, 1)?;
    let q = t.add_scalar(v, 1.0)?;
    let q = t.sqrt(q)?;
    let e = t.mean(m, 2)?;
    let e = t.tanh(e)?;
    let a = t.sum_all(q)?;
    let b2 = t.mean_all(e)?;
    let cat = t.concat(&[a, b2], 0)?;
    let sq = t.square(cat)?;
    t.sum_all(sq)
}

fn primitive_store(rng: &mut ChaCha8Rng) -> (ParamStore, Vec<ParamId>) {
    let mut store = ParamStore::new();
    let m = ModuleKind::TaskHead;
    let mut pts = Tensor::uniform(&[1, 5, 2], 0.05, 0.95, rng);
    // keep points away from pixel-grid lines of the 6×6 map
    for v in pts.data_mut() {
        let px = (*v * 6.0 - 0.5).floor() + rng.random_range(0.2..0.8);
        *v = (px + 0.5) / 6.0;
    }
    let ids = vec![
        store.add("img", m, 0, Tensor::uniform(&[1, 2, 6, 6], -1.0, 1.0, rng)),
        store.add("kernel", m, 0, Tensor::uniform(&[3, 2, 3, 3], -0.5, 0.5, rng)),
        store.add("w", m, 0, Tensor::uniform(&[3, 4], -1.0, 1.0, rng)),
        store.add("points", m, 0, pts),
    ];
    (store, ids)
}

/// Runs the finite-difference check for one scope name (see [`SCOPES`]) or
/// `"all"`.
pub fn gradcheck(scope: &str, seed: u64) -> Result<GradReport> {
    let scopes: Vec<&str> = if scope == "all" {
        SCOPES.to_vec()
    } else if SCOPES.contains(&scope) {
        vec![scope]
    } else {
        return Err(Error::Config(format!("unknown gradcheck scope {scope:?}; expected all or one of {SCOPES:?}")));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = check_config();
    let mut model = SlgNet::new(cfg.model_config(), seed, seed.wrapping_add(1))?;
    perturb(&mut model, &mut rng);
    let (inputs, targets) = random_batch(&model, &mut rng, 2)?;
    let mut modules = Vec::new();
    for name in scopes {
        let report = if name == "tensor_autodiff" {
            let (mut store, ids) = primitive_store(&mut rng);
            check_params(&mut store, &ids, name, &mut rng, |s| primitive_graph(s, &ids))?
        } else {
            let kind = match name {
                "frozen_backbone" => ModuleKind::Backbone,
                "structure_encoder" => ModuleKind::StructureEncoder,
                "ff_adapter" => ModuleKind::FfAdapter,
                "lgm" => ModuleKind::Lgm,
                _ => ModuleKind::TaskHead,
            };
            let ids: Vec<ParamId> = model.store.iter().filter(|(_, p)| p.module == kind).map(|(id, _)| id).collect();
            let net = model.clone();
            let mut store = model.store.clone();
            check_params(&mut store, &ids, name, &mut rng, |s| {
                let logits = net.forward(s, &inputs, Pathways::ALL)?;
                s.tape.bce_with_logits(logits, &targets)
            })?
        };
        modules.push(report);
    }
    let passed = modules.iter().all(|m| m.offenders.is_empty());
    Ok(GradReport { seed, threshold: MAX_REL_ERROR, modules, passed })
}

/// Largest relative error of a closure-defined scalar function of one
/// free tensor, over all its entries.
pub fn check_function(x: &Tensor, f: impl Fn(&mut Tape, Var) -> Result<Var>) -> Result<f64> {
    let mut store = ParamStore::new();
    let id = store.add("x", ModuleKind::TaskHead, 0, x.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let r = check_params(&mut store, &[id], "function", &mut rng, |s| {
        let v = s.param(id);
        f(&mut s.tape, v)
    })?;
    Ok(r.max_rel_error)
}
