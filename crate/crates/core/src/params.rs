//! Named parameter storage and per-forward-pass binding onto a tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which architectural component owns a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleKind {
    Backbone,
    StructureEncoder,
    FfAdapter,
    Lgm,
    TaskHead,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 5] =
        [ModuleKind::Backbone, ModuleKind::StructureEncoder, ModuleKind::FfAdapter, ModuleKind::Lgm, ModuleKind::TaskHead];

    pub fn name(self) -> &'static str {
        match self {
            ModuleKind::Backbone => "frozen_backbone",
            ModuleKind::StructureEncoder => "structure_encoder",
            ModuleKind::FfAdapter => "ff_adapter",
            ModuleKind::Lgm => "lgm",
            ModuleKind::TaskHead => "task_head",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == name)
    }

    pub(crate) fn code(self) -> u8 {
        self as u8
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub module: ModuleKind,
    /// Stage depth used by layer-wise learning-rate decay.
    pub stage_depth: usize,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, module: ModuleKind, stage_depth: usize, tensor: Tensor) -> ParamId {
        self.params.push(Parameter { name: name.into(), module, stage_depth, tensor });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total scalar count, optionally restricted to one module.
    pub fn numel(&self, module: Option<ModuleKind>) -> usize {
        self.params.iter().filter(|p| module.is_none_or(|m| p.module == m)).map(|p| p.tensor.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    pub fn set_requires_grad(&mut self, f: impl Fn(&Parameter) -> bool) {
        for p in &mut self.params {
            let flag = f(p);
            p.tensor.requires_grad = flag;
        }
    }

    pub fn accumulate(&mut self, grads: &ParamGrads) -> Result<()> {
        for (id, g) in &grads.0 {
            self.params[id.0].tensor.accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Replaces every value with those of `other`, which must have the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Load(format!("parameter count {} != {}", other.len(), self.len())));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.tensor.shape() != src.tensor.shape() {
                return Err(Error::Load(format!("layout mismatch at {} vs {}", dst.name, src.name)));
            }
            dst.tensor.data_mut().copy_from_slice(src.tensor.data());
        }
        Ok(())
    }
}

/// Gradients for the parameters bound in one session.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads(pub Vec<(ParamId, Vec<f64>)>);

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.0.iter().find(|(i, _)| *i == id).map(|(_, g)| g.as_slice())
    }
}

/// A tape plus the lazily bound parameters of one forward pass.
pub struct Session<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self { tape: Tape::new(), store, bound: vec![None; store.len()] }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// The tape variable for `id`, binding it on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).tensor.clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn backward(&self, loss: Var) -> Result<ParamGrads> {
        let grads = self.tape.backward(loss)?;
        let mut out = Vec::new();
        for (i, b) in self.bound.iter().enumerate() {
            if let Some(v) = b {
                if let Some(g) = grads.wrt(*v) {
                    out.push((ParamId(i), g.to_vec()));
                }
            }
        }
        Ok(ParamGrads(out))
    }
}

/// Fully connected layer over the last axis: `x · W + b`, `W` shaped `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Normal with std `1/sqrt(fan_in)`.
    LeCun,
    Zeros,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        module: ModuleKind,
        depth: usize,
        d_in: usize,
        d_out: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = match init {
            Init::LeCun => Tensor::randn(&[d_in, d_out], 1.0 / (d_in as f64).sqrt(), rng),
            Init::Zeros => Tensor::zeros(&[d_in, d_out]),
        };
        let weight = store.add(format!("{name}.weight"), module, depth, w);
        let bias = Some(store.add(format!("{name}.bias"), module, depth, Tensor::zeros(&[d_out])));
        Self { weight, bias, d_in, d_out }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.tape.linear(x, w, b)
    }

    pub fn numel(&self) -> usize {
        self.d_in * self.d_out + if self.bias.is_some() { self.d_out } else { 0 }
    }
}

/// Convolution with bias, weights `[c_out, c_in, k, k]`.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        module: ModuleKind,
        depth: usize,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (c_in * k * k) as f64;
        let weight = store.add(format!("{name}.weight"), module, depth, Tensor::randn(&[c_out, c_in, k, k], (2.0 / fan_in).sqrt(), rng));
        let bias = store.add(format!("{name}.bias"), module, depth, Tensor::zeros(&[c_out, 1, 1]));
        Self { weight, bias, stride, padding: k / 2 }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        let y = s.tape.conv2d(x, w, self.stride, self.padding)?;
        s.tape.add(y, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn session_binds_each_param_once() {
        let mut store = ParamStore::new();
        let id = store.add("w", ModuleKind::TaskHead, 0, Tensor::from_vec(vec![2.0]).with_requires_grad(true));
        let mut s = Session::new(&store);
        let a = s.param(id);
        let b = s.param(id);
        assert_eq!(a, b);
        let y = s.tape.mul(a, b).unwrap();
        let g = s.backward(y).unwrap();
        assert_eq!(g.get(id), Some(&[4.0][..]));
    }

    #[test]
    fn frozen_params_get_no_grad() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::new(&mut store, "l", ModuleKind::Backbone, 0, 3, 2, Init::LeCun, &mut rng);
        store.set_requires_grad(|p| p.name.ends_with("bias"));
        let mut s = Session::new(&store);
        let x = s.tape.constant(Tensor::full(&[4, 3], 1.0));
        let y = lin.forward(&mut s, x).unwrap();
        let l = s.tape.sum_all(y).unwrap();
        let g = s.backward(l).unwrap();
        assert!(g.get(lin.weight).is_none());
        assert_eq!(g.get(lin.bias.unwrap()), Some(&[4.0, 4.0][..]));
    }
}
