//! Synthetic aligned visible/thermal scenes with per-token occupancy targets
//! and condition-derived captions.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lgm::{SlotEmbeddings, StructuredCaption, TextEmbedder};
use crate::model::BatchInputs;
use crate::tensor::Tensor;

/// Pixel noise standard deviation shared by both modalities.
pub const NOISE_STD: f64 = 0.04;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneCondition {
    Day,
    Night,
    Overexposed,
    ThermalCrossover,
}

impl SceneCondition {
    pub const ALL: [SceneCondition; 4] = [Self::Day, Self::Night, Self::Overexposed, Self::ThermalCrossover];

    pub fn name(self) -> &'static str {
        match self {
            Self::Day => "day",
            Self::Night => "night",
            Self::Overexposed => "overexposed",
            Self::ThermalCrossover => "thermal_crossover",
        }
    }

    pub fn visible_has_targets(self) -> bool {
        matches!(self, Self::Day | Self::ThermalCrossover)
    }

    pub fn thermal_has_targets(self) -> bool {
        !matches!(self, Self::ThermalCrossover)
    }

    /// Day/night split used for reporting: night and overexposed scenes
    /// count as night, crossover scenes (sunlit) as day.
    pub fn is_night(self) -> bool {
        matches!(self, Self::Night | Self::Overexposed)
    }

    pub fn group(self) -> &'static str {
        if self.is_night() {
            "night"
        } else {
            "day"
        }
    }
}

impl fmt::Display for SceneCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Sampling weights over the four conditions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionMix(pub [f64; 4]);

impl Default for ConditionMix {
    fn default() -> Self {
        Self([0.25; 4])
    }
}

impl ConditionMix {
    pub fn only(c: SceneCondition) -> Self {
        let mut w = [0.0; 4];
        w[c as usize] = 1.0;
        Self(w)
    }

    fn validate(&self) -> Result<()> {
        let total: f64 = self.0.iter().sum();
        if self.0.iter().any(|w| !w.is_finite() || *w < 0.0) || total <= 0.0 {
            return Err(Error::Config(format!("invalid condition mix {:?}", self.0)));
        }
        Ok(())
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SceneCondition {
        let total: f64 = self.0.iter().sum();
        let mut u = rng.random::<f64>() * total;
        for (c, w) in SceneCondition::ALL.iter().zip(self.0) {
            if u < w {
                return *c;
            }
            u -= w;
        }
        SceneCondition::ALL[self.0.iter().rposition(|w| *w > 0.0).unwrap_or(0)]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CaptionPolicy {
    #[default]
    Structured,
    FreeFormNoisy,
    CategoryList,
}

impl CaptionPolicy {
    pub const ALL: [CaptionPolicy; 3] = [Self::Structured, Self::FreeFormNoisy, Self::CategoryList];

    pub fn name(self) -> &'static str {
        match self {
            Self::Structured => "structured",
            Self::FreeFormNoisy => "free-form-noisy",
            Self::CategoryList => "category-list",
        }
    }
}

impl FromStr for CaptionPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| Error::Config(format!("unknown caption policy {s:?}")))
    }
}

/// A filled disk in pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Disk {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

impl Disk {
    /// Whether the centre of pixel `(x, y)` lies inside.
    pub fn covers(&self, x: usize, y: usize) -> bool {
        let dx = x as f64 + 0.5 - self.cx;
        let dy = y as f64 + 0.5 - self.cy;
        dx * dx + dy * dy <= self.r * self.r
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub image_size: usize,
    /// Token cell side in pixels.
    pub cell: usize,
}

impl SynthConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.cell
    }

    fn validate(&self) -> Result<()> {
        if self.image_size < 16 || self.cell == 0 || !self.image_size.is_multiple_of(self.cell) {
            return Err(Error::Config(format!("degenerate synthetic image size {} with cell {}", self.image_size, self.cell)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSample {
    pub id: String,
    pub seed: u64,
    pub condition: SceneCondition,
    /// `[3,H,W]` in `[0,1]`.
    pub visible: Tensor,
    /// `[1,H,W]` in `[0,1]`.
    pub thermal: Tensor,
    /// Per-token occupancy, row-major over the token grid.
    pub heatmap: Vec<f64>,
    pub targets: Vec<Disk>,
    /// Distractor blobs, drawn only in the modality that lacks targets (or a
    /// random one in daylight).
    pub clutter: Vec<Disk>,
    pub caption: StructuredCaption,
}

fn sample_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
    rng.set_stream(index as u64);
    rng.random()
}

fn place_disks<R: Rng + ?Sized>(rng: &mut R, count: usize, size: f64, avoid: &[Disk]) -> Vec<Disk> {
    let mut out: Vec<Disk> = Vec::with_capacity(count);
    let mut tries = 0;
    while out.len() < count && tries < 200 {
        tries += 1;
        let r = rng.random_range(0.06..0.11) * size;
        let cx = rng.random_range(r..size - r);
        let cy = rng.random_range(r..size - r);
        let d = Disk { cx, cy, r };
        let clear = out.iter().chain(avoid).all(|o| (o.cx - cx).hypot(o.cy - cy) > o.r + r + 2.0);
        if clear {
            out.push(d);
        }
    }
    out
}

/// Smooth background: a level plus a linear illumination ramp.
fn background<R: Rng + ?Sized>(rng: &mut R, size: usize, level: f64, ramp: f64) -> Vec<f64> {
    let (gx, gy) = (rng.random_range(-ramp..ramp), rng.random_range(-ramp..ramp));
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let u = x as f64 / size as f64 - 0.5;
            let v = y as f64 / size as f64 - 0.5;
            out[y * size + x] = level + gx * u + gy * v;
        }
    }
    out
}

fn draw(plane: &mut [f64], size: usize, disks: &[(Disk, f64)]) {
    for y in 0..size {
        for x in 0..size {
            for (d, delta) in disks {
                if d.covers(x, y) {
                    plane[y * size + x] += delta;
                }
            }
        }
    }
}

fn add_noise<R: Rng + ?Sized>(rng: &mut R, plane: &mut [f64]) {
    let n = Normal::new(0.0, NOISE_STD).expect("valid std");
    for v in plane.iter_mut() {
        *v = (*v + n.sample(rng)).clamp(0.0, 1.0);
    }
}

/// Visible-band blob contrast: either polarity.
fn visible_delta<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let c = rng.random_range(0.2..0.35);
    if rng.random::<bool>() {
        c
    } else {
        -c
    }
}

fn thermal_delta<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random_range(0.25..0.4)
}

pub fn heatmap(targets: &[Disk], size: usize, cell: usize) -> Vec<f64> {
    let g = size / cell;
    let mut out = vec![0.0; g * g];
    for y in 0..size {
        for x in 0..size {
            if targets.iter().any(|d| d.covers(x, y)) {
                out[(y / cell) * g + x / cell] = 1.0;
            }
        }
    }
    out
}

fn truthful_caption<R: Rng + ?Sized>(rng: &mut R, condition: SceneCondition, targets: usize) -> StructuredCaption {
    let env = match condition {
        SceneCondition::Day => "clear daytime",
        SceneCondition::Night => "dark night",
        SceneCondition::Overexposed => "overexposed glare",
        SceneCondition::ThermalCrossover => "warm afternoon",
    };
    let scene = ["road", "open field", "parking lot", "street crossing"][rng.random_range(0..4)];
    let obj = match targets {
        0 | 1 => "sparse",
        2 => "moderate",
        _ => "dense",
    };
    let therm = match condition {
        SceneCondition::Day => "targets warm",
        SceneCondition::Night | SceneCondition::Overexposed => "targets hot",
        SceneCondition::ThermalCrossover => "targets blend with background",
    };
    StructuredCaption::new(env, scene, obj, therm)
}

/// Rewrites a truthful caption under `policy`.
pub fn apply_policy<R: Rng + ?Sized>(rng: &mut R, caption: &StructuredCaption, policy: CaptionPolicy) -> StructuredCaption {
    match policy {
        CaptionPolicy::Structured => caption.clone(),
        CaptionPolicy::CategoryList => {
            let s = "person car bicycle";
            StructuredCaption::new(s, s, s, s)
        }
        CaptionPolicy::FreeFormNoisy => {
            let mut slots: Vec<&str> = caption.slots().to_vec();
            slots.shuffle(rng);
            let words: Vec<&str> = slots.iter().flat_map(|s| s.split_whitespace()).collect();
            let chunk = words.len().div_ceil(4).max(1);
            let mut parts: Vec<String> = words.chunks(chunk).map(|c| c.join(" ")).collect();
            parts.resize(4, String::new());
            StructuredCaption::from_slots(parts.try_into().expect("four parts"))
        }
    }
}

/// Deterministic dataset: sample `i` depends only on `(seed, i)`.
pub fn synthesize(n: usize, mix: ConditionMix, seed: u64, cfg: &SynthConfig, policy: CaptionPolicy) -> Result<Vec<SyntheticSample>> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    cfg.validate()?;
    mix.validate()?;
    (0..n).map(|i| synthesize_one(i, mix, seed, cfg, policy)).collect()
}

fn synthesize_one(index: usize, mix: ConditionMix, seed: u64, cfg: &SynthConfig, policy: CaptionPolicy) -> Result<SyntheticSample> {
    let s = sample_seed(seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    let size = cfg.image_size;
    let fs = size as f64;
    let condition = mix.sample(&mut rng);
    let n_targets = rng.random_range(1..=3);
    let targets = place_disks(&mut rng, n_targets, fs, &[]);
    let n_clutter = rng.random_range(1..=2);
    let clutter = place_disks(&mut rng, n_clutter, fs, &targets);
    let clutter_in_visible = match condition {
        SceneCondition::Day => rng.random::<bool>(),
        c => !c.visible_has_targets(),
    };

    let mut vis_blobs = Vec::new();
    let mut thr_blobs = Vec::new();
    if condition.visible_has_targets() {
        vis_blobs.extend(targets.iter().map(|d| (*d, visible_delta(&mut rng))));
    }
    if condition.thermal_has_targets() {
        thr_blobs.extend(targets.iter().map(|d| (*d, thermal_delta(&mut rng))));
    }
    if clutter_in_visible {
        vis_blobs.extend(clutter.iter().map(|d| (*d, visible_delta(&mut rng))));
    } else {
        thr_blobs.extend(clutter.iter().map(|d| (*d, thermal_delta(&mut rng))));
    }

    // Auto-gain keeps night scenes at the same mean level as daylight ones;
    // overexposure lifts everything towards saturation.
    let vis_level = match condition {
        SceneCondition::Overexposed => rng.random_range(0.8..0.9),
        _ => rng.random_range(0.35..0.65),
    };
    let mut luma = background(&mut rng, size, vis_level, 0.2);
    draw(&mut luma, size, &vis_blobs);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.9..1.1));
    let mut visible = Vec::with_capacity(3 * size * size);
    for t in tint {
        let mut plane: Vec<f64> = luma.iter().map(|v| v * t).collect();
        add_noise(&mut rng, &mut plane);
        visible.extend(plane);
    }
    let thr_level = rng.random_range(0.25..0.45);
    let mut thermal = background(&mut rng, size, thr_level, 0.15);
    draw(&mut thermal, size, &thr_blobs);
    add_noise(&mut rng, &mut thermal);

    let truthful = truthful_caption(&mut rng, condition, targets.len());
    let caption = apply_policy(&mut rng, &truthful, policy);
    Ok(SyntheticSample {
        id: format!("{seed}-{index}"),
        seed: s,
        condition,
        visible: Tensor::new(vec![3, size, size], visible)?,
        thermal: Tensor::new(vec![1, size, size], thermal)?,
        heatmap: heatmap(&targets, size, cfg.cell),
        targets,
        clutter,
        caption,
    })
}

/// Samples plus their frozen caption embeddings.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<SyntheticSample>,
    pub embeddings: Vec<SlotEmbeddings>,
}

impl Dataset {
    pub fn new(samples: Vec<SyntheticSample>, embedder: &TextEmbedder) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let embeddings = samples
            .iter()
            .map(|s| match embedder {
                TextEmbedder::Toy { .. } => embedder.embed_caption(&s.caption),
                TextEmbedder::File { .. } => embedder.lookup(&s.id),
            })
            .collect::<Result<_>>()?;
        Ok(Self { samples, embeddings })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stacks the samples at `indices` into network inputs and flat targets.
    pub fn batch(&self, indices: &[usize]) -> Result<(BatchInputs, Vec<f64>)> {
        self.batch_with_captions(indices, indices)
    }

    /// Like [`Dataset::batch`] but taking caption embeddings from
    /// `caption_indices` (used to break the caption/scene link).
    pub fn batch_with_captions(&self, indices: &[usize], caption_indices: &[usize]) -> Result<(BatchInputs, Vec<f64>)> {
        if indices.is_empty() || indices.len() != caption_indices.len() {
            return Err(Error::EmptyDataset);
        }
        let n = indices.len();
        let first = &self.samples[indices[0]];
        let (h, w) = (first.visible.shape()[1], first.visible.shape()[2]);
        let mut vis = Vec::with_capacity(n * 3 * h * w);
        let mut thr = Vec::with_capacity(n * h * w);
        let mut targets = Vec::new();
        for &i in indices {
            let s = &self.samples[i];
            vis.extend_from_slice(s.visible.data());
            thr.extend_from_slice(s.thermal.data());
            targets.extend_from_slice(&s.heatmap);
        }
        let emb0 = &self.embeddings[caption_indices[0]];
        let (l, d) = (emb0.seq_len(), emb0.dim());
        let captions = std::array::from_fn(|slot| {
            let mut data = Vec::with_capacity(n * l * d);
            for &i in caption_indices {
                data.extend_from_slice(self.embeddings[i].slots[slot].data());
            }
            Tensor::new(vec![n, l, d], data)
        });
        let [a, b, c, e] = captions;
        let inputs = BatchInputs {
            visible: Tensor::new(vec![n, 3, h, w], vis)?,
            thermal: Tensor::new(vec![n, 1, h, w], thr)?,
            captions: Some([a?, b?, c?, e?]),
        };
        Ok((inputs, targets))
    }
}
