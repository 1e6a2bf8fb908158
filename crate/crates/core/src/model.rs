//! Full network: frozen backbone, structure encoder with sparse-attention
//! injection, language modulation and a per-token occupancy head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterConfig, FfAdapter};
use crate::autodiff::Var;
use crate::backbone::{Backbone, BackboneConfig, TokenGrid};
use crate::error::{Error, Result};
use crate::lgm::{modulate_tokens, Lgm, LgmConfig};
use crate::params::{Init, Linear, ModuleKind, ParamStore, Session};
use crate::structure::{EncoderConfig, StructureEncoder};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub encoder: EncoderConfig,
    pub adapter: AdapterConfig,
    pub lgm: LgmConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if !self.backbone.image_size.is_multiple_of(32) {
            return Err(Error::Config(format!("image_size {} must be divisible by 32 for the three-level pyramid", self.backbone.image_size)));
        }
        Ok(())
    }

    /// `(h, w)` of the three pyramid levels.
    pub fn level_extents(&self) -> [(usize, usize); 3] {
        let s = self.backbone.image_size;
        [(s / 8, s / 8), (s / 16, s / 16), (s / 32, s / 32)]
    }

    /// Stage depth of the heads: one past the last block.
    pub fn max_depth(&self) -> usize {
        self.backbone.depth + 1
    }
}

/// Which optional pathways a forward pass uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pathways {
    pub structure: bool,
    pub language: bool,
}

impl Pathways {
    pub const ALL: Pathways = Pathways { structure: true, language: true };
    pub const NONE: Pathways = Pathways { structure: false, language: false };
}

/// One batch of network inputs.
#[derive(Clone, Debug)]
pub struct BatchInputs {
    /// `[N,3,H,W]`
    pub visible: Tensor,
    /// `[N,1,H,W]`
    pub thermal: Tensor,
    /// Four slot tensors `[N,L,d]`; required when the language pathway is on.
    pub captions: Option<[Tensor; 4]>,
}

#[derive(Clone, Debug)]
pub struct SlgNet {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub encoder: StructureEncoder,
    pub adapter: FfAdapter,
    pub lgm: Lgm,
    pub head: Linear,
}

impl SlgNet {
    /// The backbone comes from `backbone_seed` (standing in for fixed
    /// pretrained weights); everything else from `seed`.
    pub fn new(config: ModelConfig, backbone_seed: u64, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let backbone = Backbone::init_frozen(&mut store, config.backbone.clone(), backbone_seed)?;
        let d = config.backbone.width;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sub = || rand::Rng::random::<u64>(&mut rng);
        let encoder = StructureEncoder::new(&mut store, config.encoder.clone(), d, sub())?;
        let adapter = FfAdapter::new(&mut store, config.adapter.clone(), config.backbone.depth, d, config.level_extents(), sub())?;
        let lgm = Lgm::new(&mut store, config.lgm.clone(), d, config.max_depth(), sub())?;
        let mut head_rng = ChaCha8Rng::seed_from_u64(sub());
        let head = Linear::new(&mut store, "head", ModuleKind::TaskHead, config.max_depth(), d, 1, Init::LeCun, &mut head_rng);
        Ok(Self { config, store, backbone, encoder, adapter, lgm, head })
    }

    /// Final token features before the head, `[N,T,D]`.
    pub fn features(&self, s: &mut Session, batch: &BatchInputs, paths: Pathways) -> Result<TokenGrid> {
        let vis = s.tape.constant(batch.visible.clone());
        let thr = s.tape.constant(batch.thermal.clone());
        let image = s.tape.concat(&[vis, thr], 1)?;
        let mut grid = self.backbone.patch_embed(s, image)?;
        let mut pyramid = if paths.structure { Some(self.encoder.encode(s, vis, thr)?.0) } else { None };
        for i in 0..self.backbone.depth() {
            if let Some(p) = pyramid.as_mut() {
                if i > 0 {
                    *p = self.adapter.evolve(s, i, p)?;
                }
                grid = self.adapter.inject(s, i, &grid, p)?;
            }
            grid = self.backbone.run_block(s, i, &grid)?;
        }
        let mut grid = self.backbone.final_norm(s, &grid)?;
        if paths.language {
            let caps = batch.captions.as_ref().ok_or_else(|| Error::Config("language pathway needs caption embeddings".into()))?;
            let slots = [0, 1, 2, 3].map(|i| s.tape.constant(caps[i].clone()));
            let fused = self.lgm.fuse_slots(s, slots)?;
            let (g, b) = self.lgm.heads(s, fused)?;
            grid.tokens = modulate_tokens(&mut s.tape, grid.tokens, g, b)?;
        }
        Ok(grid)
    }

    /// Per-token occupancy logits `[N,T]`.
    pub fn forward(&self, s: &mut Session, batch: &BatchInputs, paths: Pathways) -> Result<Var> {
        let grid = self.features(s, batch, paths)?;
        let logits = self.head.forward(s, grid.tokens)?;
        let shape = s.tape.shape(logits).to_vec();
        s.tape.reshape(logits, &[shape[0], shape[1]])
    }

    pub fn logits(&self, batch: &BatchInputs, paths: Pathways) -> Result<Vec<f64>> {
        let mut s = Session::new(&self.store);
        let y = self.forward(&mut s, batch, paths)?;
        Ok(s.tape.data(y).to_vec())
    }
}
