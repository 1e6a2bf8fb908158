//! Frozen/trainable labelling of every parameter for each training mode.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Pathways, SlgNet};
use crate::params::{ModuleKind, ParamId, ParamStore, Parameter};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrainMode {
    /// Every non-backbone module trains; the backbone is frozen.
    #[serde(rename = "adapter")]
    Adapter,
    /// Everything trains.
    #[serde(rename = "full")]
    Full,
    /// Pixel-concatenated input; only the patch embedding and head train.
    #[serde(rename = "baseline")]
    Baseline,
    /// Baseline plus the structure encoder and sparse-attention adapters.
    #[serde(rename = "+sa")]
    Sa,
    /// `+sa` plus language modulation.
    #[serde(rename = "+sa+lgm")]
    SaLgm,
}

impl TrainMode {
    pub const ALL: [TrainMode; 5] = [Self::Adapter, Self::Full, Self::Baseline, Self::Sa, Self::SaLgm];

    pub fn name(self) -> &'static str {
        match self {
            Self::Adapter => "adapter",
            Self::Full => "full",
            Self::Baseline => "baseline",
            Self::Sa => "+sa",
            Self::SaLgm => "+sa+lgm",
        }
    }

    pub fn pathways(self) -> Pathways {
        match self {
            Self::Baseline => Pathways::NONE,
            Self::Sa => Pathways { structure: true, language: false },
            Self::Adapter | Self::Full | Self::SaLgm => Pathways::ALL,
        }
    }

    fn trains(self, model: &SlgNet, id: ParamId, p: &Parameter) -> bool {
        let patch_embed = {
            let proj = model.backbone.patch_proj();
            id == proj.weight || Some(id) == proj.bias
        };
        match self {
            Self::Full => true,
            Self::Adapter => p.module != ModuleKind::Backbone,
            Self::Baseline => patch_embed || p.module == ModuleKind::TaskHead,
            Self::Sa => patch_embed || matches!(p.module, ModuleKind::TaskHead | ModuleKind::StructureEncoder | ModuleKind::FfAdapter),
            Self::SaLgm => patch_embed || p.module != ModuleKind::Backbone,
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Frozen,
    Adapter,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub role: Role,
    pub stage_depth: usize,
}

/// One entry per parameter, indexed by `ParamId`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamPartition {
    entries: Vec<Entry>,
    numel: Vec<usize>,
    pub max_depth: usize,
}

impl ParamPartition {
    /// Builds a partition from explicit roles, which must cover `store`.
    pub fn from_roles(store: &ParamStore, roles: Vec<Option<Role>>, max_depth: usize) -> Result<Self> {
        if roles.len() != store.len() {
            return Err(Error::Partition(format!("{} roles for {} parameters", roles.len(), store.len())));
        }
        let mut entries = Vec::with_capacity(roles.len());
        for ((_, p), role) in store.iter().zip(roles) {
            let role = role.ok_or_else(|| Error::Partition(format!("parameter {} has no role", p.name)))?;
            if p.stage_depth > max_depth {
                return Err(Error::Partition(format!("parameter {} depth {} exceeds {max_depth}", p.name, p.stage_depth)));
            }
            entries.push(Entry { role, stage_depth: p.stage_depth });
        }
        let numel = store.iter().map(|(_, p)| p.tensor.len()).collect();
        Ok(Self { entries, numel, max_depth })
    }

    pub fn get(&self, id: ParamId) -> Entry {
        self.entries[id.0]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self, role: Role) -> impl Iterator<Item = ParamId> + '_ {
        self.entries.iter().enumerate().filter(move |(_, e)| e.role == role).map(|(i, _)| ParamId(i))
    }

    pub fn params_total(&self) -> usize {
        self.numel.iter().sum()
    }

    pub fn params_trainable(&self) -> usize {
        self.ids(Role::Adapter).map(|id| self.numel[id.0]).sum()
    }

    pub fn trainable_fraction(&self) -> f64 {
        self.params_trainable() as f64 / self.params_total() as f64
    }
}

pub fn partition(model: &SlgNet, mode: TrainMode) -> Result<ParamPartition> {
    let roles = model.store.iter().map(|(id, p)| Some(if mode.trains(model, id, p) { Role::Adapter } else { Role::Frozen })).collect();
    ParamPartition::from_roles(&model.store, roles, model.config.max_depth())
}

/// Marks adapter parameters as requiring gradients and clears the rest.
pub fn apply(store: &mut ParamStore, part: &ParamPartition) {
    for (id, p) in store.iter_mut() {
        p.tensor.requires_grad = part.get(id).role == Role::Adapter;
    }
}
