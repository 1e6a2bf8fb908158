//! Flat JSON run configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterConfig, OffsetUnits};
use crate::backbone::BackboneConfig;
use crate::error::Result;
use crate::harness::data::{synthesize, CaptionPolicy, ConditionMix, Dataset, SynthConfig};
use crate::harness::optim::OptimizerConfig;
use crate::harness::partition::TrainMode;
use crate::harness::train::{train, TrainingReport};
use crate::lgm::{LgmConfig, TextEmbedder};
use crate::model::{ModelConfig, SlgNet};
use crate::structure::{EncoderConfig, SsimParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub image_size: usize,
    pub patch_size: usize,
    /// Overrides `patch_size` with `image_size / 16`.
    pub paper_ratio: bool,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub stem_channels: usize,
    pub level_channels: usize,
    pub sampling_points: usize,
    pub evolver_hidden: usize,
    pub offset_units: OffsetUnits,
    pub embed_dim: usize,
    pub seq_len: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub layer_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub backbone_seed: u64,
    pub train_samples: usize,
    pub val_samples: usize,
    pub caption_policy: CaptionPolicy,
    pub condition_mix: ConditionMix,
    pub text_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let b = BackboneConfig::default();
        let e = EncoderConfig::default();
        let a = AdapterConfig::default();
        let l = LgmConfig::default();
        let o = OptimizerConfig::default();
        Self {
            image_size: b.image_size,
            patch_size: b.patch_size,
            paper_ratio: false,
            depth: b.depth,
            width: b.width,
            heads: b.heads,
            mlp_ratio: b.mlp_ratio,
            stem_channels: e.stem_channels,
            level_channels: e.level_channels,
            sampling_points: a.points,
            evolver_hidden: a.evolver_hidden,
            offset_units: a.offset_units,
            embed_dim: l.embed_dim,
            seq_len: l.seq_len,
            base_lr: o.base_lr,
            weight_decay: o.weight_decay,
            layer_decay: o.layer_decay,
            epochs: o.epochs,
            batch_size: o.batch_size,
            seed: o.seed,
            backbone_seed: 7,
            train_samples: 256,
            val_samples: 128,
            caption_policy: CaptionPolicy::Structured,
            condition_mix: ConditionMix::default(),
            text_seed: 11,
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Settings used by the ablation driver: a narrower backbone, a short
    /// schedule and a larger base learning rate, so that 21 runs fit in a
    /// few minutes on one core.
    pub fn ablation() -> Self {
        Self { width: 32, heads: 2, base_lr: 1e-2, epochs: 8, train_samples: 128, val_samples: 64, ..Self::default() }
    }

    pub fn model_config(&self) -> ModelConfig {
        let patch_size = if self.paper_ratio { self.image_size / 16 } else { self.patch_size };
        ModelConfig {
            backbone: BackboneConfig {
                image_size: self.image_size,
                patch_size,
                depth: self.depth,
                width: self.width,
                heads: self.heads,
                mlp_ratio: self.mlp_ratio,
            },
            encoder: EncoderConfig { stem_channels: self.stem_channels, level_channels: self.level_channels, ssim: SsimParams::default() },
            adapter: AdapterConfig { points: self.sampling_points, evolver_hidden: self.evolver_hidden, offset_units: self.offset_units },
            lgm: LgmConfig { seq_len: self.seq_len, embed_dim: self.embed_dim },
        }
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            base_lr: self.base_lr,
            weight_decay: self.weight_decay,
            layer_decay: self.layer_decay,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            ..OptimizerConfig::default()
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        let m = self.model_config();
        SynthConfig { image_size: self.image_size, cell: m.backbone.patch_size }
    }

    pub fn embedder(&self) -> TextEmbedder {
        TextEmbedder::toy(self.text_seed, self.seq_len, self.embed_dim)
    }

    pub fn build_model(&self) -> Result<SlgNet> {
        SlgNet::new(self.model_config(), self.backbone_seed, self.seed)
    }

    fn dataset(&self, n: usize, stream: u64, policy: CaptionPolicy) -> Result<Dataset> {
        let samples = synthesize(n, self.condition_mix, self.seed.wrapping_mul(1_000_003).wrapping_add(stream), &self.synth_config(), policy)?;
        Dataset::new(samples, &self.embedder())
    }

    pub fn train_set(&self) -> Result<Dataset> {
        self.dataset(self.train_samples, 1, self.caption_policy)
    }

    pub fn val_set(&self) -> Result<Dataset> {
        self.dataset(self.val_samples, 2, self.caption_policy)
    }

    /// Builds model and data, then trains in `mode`.
    pub fn run(&self, mode: TrainMode) -> Result<(SlgNet, Dataset, TrainingReport)> {
        let mut model = self.build_model()?;
        let train_set = self.train_set()?;
        let val = self.val_set()?;
        let report = train(&mut model, mode, &self.optimizer_config(), &train_set, &val)?;
        Ok((model, val, report))
    }
}
