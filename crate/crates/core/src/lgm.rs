//! Caption slots to channel-wise scale and shift of the final features.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Init, Linear, ModuleKind, ParamStore, Session};
use crate::tensor::Tensor;

pub const SLOT_KEYS: [&str; 4] = ["env", "type", "obj", "therm"];

/// Four-slot scene description; empty strings mean "unknown".
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StructuredCaption {
    pub env: String,
    #[serde(rename = "type")]
    pub scene_type: String,
    pub obj: String,
    pub therm: String,
}

impl StructuredCaption {
    pub fn new(env: &str, scene_type: &str, obj: &str, therm: &str) -> Self {
        Self { env: env.into(), scene_type: scene_type.into(), obj: obj.into(), therm: therm.into() }
    }

    pub fn slots(&self) -> [&str; 4] {
        [&self.env, &self.scene_type, &self.obj, &self.therm]
    }

    pub fn from_slots(slots: [String; 4]) -> Self {
        let [env, scene_type, obj, therm] = slots;
        Self { env, scene_type, obj, therm }
    }
}

/// Reads one caption per line from a JSON-lines file.
pub fn read_caption_lines(path: &Path) -> Result<Vec<StructuredCaption>> {
    let text = std::fs::read_to_string(path)?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| serde_json::from_str(l).map_err(Error::from)).collect()
}

/// Token matrices of the four slots, each `[L, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotEmbeddings {
    pub slots: [Tensor; 4],
}

impl SlotEmbeddings {
    pub fn seq_len(&self) -> usize {
        self.slots[0].shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.slots[0].shape()[1]
    }
}

fn fnv1a(bytes: impl IntoIterator<Item = u8>, mut h: u64) -> u64 {
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Frozen text encoder boundary.
#[derive(Clone, Debug)]
pub enum TextEmbedder {
    /// Whitespace tokens hashed with their position into unit vectors,
    /// zero rows for padding.
    Toy { seed: u64, seq_len: usize, dim: usize },
    /// Precomputed matrices keyed by sample id.
    File { seq_len: usize, dim: usize, table: HashMap<String, SlotEmbeddings> },
}

#[derive(Deserialize)]
struct FileEntry {
    env: Option<Vec<Vec<f64>>>,
    #[serde(rename = "type")]
    scene_type: Option<Vec<Vec<f64>>>,
    obj: Option<Vec<Vec<f64>>>,
    therm: Option<Vec<Vec<f64>>>,
}

impl TextEmbedder {
    pub fn toy(seed: u64, seq_len: usize, dim: usize) -> Self {
        Self::Toy { seed, seq_len, dim }
    }

    /// Loads `{ sample_id: { "env": [[..]; L], "type": .., "obj": .., "therm": .. } }`.
    pub fn from_json_file(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let raw: HashMap<String, FileEntry> = serde_json::from_str(text)?;
        let mut table = HashMap::with_capacity(raw.len());
        let mut dims: Option<(usize, usize)> = None;
        let mut ids: Vec<_> = raw.keys().cloned().collect();
        ids.sort();
        let mut raw = raw;
        for id in ids {
            let entry = raw.remove(&id).expect("key present");
            let rows = [entry.env, entry.scene_type, entry.obj, entry.therm];
            let mut slots = Vec::with_capacity(4);
            for (key, m) in SLOT_KEYS.iter().zip(rows) {
                let m = m.ok_or_else(|| Error::Load(format!("sample {id}: missing slot \"{key}\"")))?;
                let l = m.len();
                let d = m.first().map_or(0, Vec::len);
                if l == 0 || d == 0 || m.iter().any(|r| r.len() != d) {
                    return Err(Error::Load(format!("sample {id}: slot \"{key}\" is not a non-empty rectangular matrix")));
                }
                match dims {
                    None => dims = Some((l, d)),
                    Some(prev) if prev != (l, d) => {
                        return Err(Error::Load(format!("sample {id}: slot \"{key}\" is {l}x{d}, expected {}x{}", prev.0, prev.1)))
                    }
                    _ => {}
                }
                slots.push(Tensor::new(vec![l, d], m.concat()).map_err(|e| Error::Load(format!("sample {id}: {e}")))?);
            }
            let slots: [Tensor; 4] = slots.try_into().expect("four slots");
            table.insert(id, SlotEmbeddings { slots });
        }
        let (seq_len, dim) = dims.ok_or_else(|| Error::Load("embedding file has no samples".into()))?;
        Ok(Self::File { seq_len, dim, table })
    }

    pub fn seq_len(&self) -> usize {
        match self {
            Self::Toy { seq_len, .. } | Self::File { seq_len, .. } => *seq_len,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Toy { dim, .. } | Self::File { dim, .. } => *dim,
        }
    }

    /// Embeds one slot string with the toy embedder.
    pub fn embed_text(&self, text: &str) -> Result<Tensor> {
        let Self::Toy { seed, seq_len, dim } = *self else {
            return Err(Error::Load("file-backed embedder has no text encoder; look up by sample id".into()));
        };
        let mut data = vec![0.0; seq_len * dim];
        for (pos, token) in text.split_whitespace().take(seq_len).enumerate() {
            let h = fnv1a(seed.to_le_bytes().into_iter().chain((pos as u64).to_le_bytes()).chain(token.bytes()), 0xcbf2_9ce4_8422_2325);
            let mut rng = ChaCha8Rng::seed_from_u64(h);
            let row = &mut data[pos * dim..(pos + 1) * dim];
            for v in row.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Tensor::new(vec![seq_len, dim], data)
    }

    pub fn embed_caption(&self, caption: &StructuredCaption) -> Result<SlotEmbeddings> {
        let slots = caption.slots();
        Ok(SlotEmbeddings { slots: [self.embed_text(slots[0])?, self.embed_text(slots[1])?, self.embed_text(slots[2])?, self.embed_text(slots[3])?] })
    }

    pub fn lookup(&self, sample_id: &str) -> Result<SlotEmbeddings> {
        match self {
            Self::File { table, .. } => table.get(sample_id).cloned().ok_or_else(|| Error::Load(format!("no embeddings for sample {sample_id}"))),
            Self::Toy { .. } => Err(Error::Load("toy embedder embeds text, not sample ids".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LgmConfig {
    pub seq_len: usize,
    pub embed_dim: usize,
}

impl Default for LgmConfig {
    fn default() -> Self {
        Self { seq_len: 77, embed_dim: 16 }
    }
}

#[derive(Clone, Debug)]
struct Head {
    fc1: Linear,
    fc2: Linear,
}

impl Head {
    fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.fc1.forward(s, x)?;
        let h = s.tape.gelu(h)?;
        self.fc2.forward(s, h)
    }
}

#[derive(Clone, Debug)]
pub struct Lgm {
    pub config: LgmConfig,
    fuse1: Linear,
    fuse2: Linear,
    gamma: Head,
    beta: Head,
}

impl Lgm {
    pub fn new(store: &mut ParamStore, config: LgmConfig, channels: usize, depth: usize, seed: u64) -> Result<Self> {
        let d = config.embed_dim;
        if d == 0 || config.seq_len == 0 || channels == 0 {
            return Err(Error::Config("LGM dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = ModuleKind::Lgm;
        let mut head = |name: &str, rng: &mut ChaCha8Rng| Head {
            fc1: Linear::new(store, &format!("lgm.{name}.fc1"), m, depth, d, d, Init::LeCun, rng),
            fc2: Linear::new(store, &format!("lgm.{name}.fc2"), m, depth, d, channels, Init::Zeros, rng),
        };
        let gamma = head("gamma", &mut rng);
        let beta = head("beta", &mut rng);
        let fuse1 = Linear::new(store, "lgm.fuse1", m, depth, 4 * d, 2 * d, Init::LeCun, &mut rng);
        let fuse2 = Linear::new(store, "lgm.fuse2", m, depth, 2 * d, d, Init::LeCun, &mut rng);
        Ok(Self { config, fuse1, fuse2, gamma, beta })
    }

    pub fn fuse_layers(&self) -> (&Linear, &Linear) {
        (&self.fuse1, &self.fuse2)
    }

    /// Concatenates the slot matrices (`[.., L, d]` each) along channels and
    /// projects token-wise back to `d`.
    pub fn fuse_slots(&self, s: &mut Session, slots: [Var; 4]) -> Result<Var> {
        let first = s.tape.shape(slots[0]).to_vec();
        for v in &slots[1..] {
            if s.tape.shape(*v) != first.as_slice() {
                return Err(Error::Dimension(format!("slot shapes differ: {first:?} vs {:?}", s.tape.shape(*v))));
            }
        }
        if first.last() != Some(&self.config.embed_dim) {
            return Err(Error::Dimension(format!("slot width {first:?} != {}", self.config.embed_dim)));
        }
        let axis = first.len() - 1;
        let x = s.tape.concat(&slots, axis)?;
        let h = self.fuse1.forward(s, x)?;
        let h = s.tape.gelu(h)?;
        self.fuse2.forward(s, h)
    }

    /// Mean-pools the token axis (second to last) and returns `(γ, β)`.
    pub fn heads(&self, s: &mut Session, fused: Var) -> Result<(Var, Var)> {
        let rank = s.tape.shape(fused).len();
        if rank < 2 {
            return Err(Error::Dimension("fused text features need a token axis".into()));
        }
        let pooled = s.tape.mean(fused, rank - 2)?;
        let g = self.gamma.forward(s, pooled)?;
        let b = self.beta.forward(s, pooled)?;
        Ok((g, b))
    }
}

/// `(γ + 1)·F + β` on `[N,C,h,w]` features; `γ`, `β` are `[C]` or `[N,C]`.
pub fn modulate(tape: &mut Tape, f: Var, gamma: Var, beta: Var) -> Result<Var> {
    let fs = tape.shape(f).to_vec();
    if fs.len() != 4 {
        return Err(Error::Dimension(format!("modulate expects [N,C,h,w], got {fs:?}")));
    }
    let target = match tape.shape(gamma) {
        [c] if *c == fs[1] => vec![1, fs[1], 1, 1],
        [n, c] if *n == fs[0] && *c == fs[1] => vec![fs[0], fs[1], 1, 1],
        other => return Err(Error::Dimension(format!("modulation {other:?} does not match channels of {fs:?}"))),
    };
    if tape.shape(beta) != tape.shape(gamma) {
        return Err(Error::Dimension(format!("gamma {:?} vs beta {:?}", tape.shape(gamma), tape.shape(beta))));
    }
    let g = tape.reshape(gamma, &target)?;
    let b = tape.reshape(beta, &target)?;
    affine(tape, f, g, b)
}

/// `(γ + 1)·F + β` on token features `[N,T,C]` with `γ`, `β` shaped `[N,C]`.
pub fn modulate_tokens(tape: &mut Tape, f: Var, gamma: Var, beta: Var) -> Result<Var> {
    let fs = tape.shape(f).to_vec();
    if fs.len() != 3 || tape.shape(gamma) != [fs[0], fs[2]] || tape.shape(beta) != [fs[0], fs[2]] {
        return Err(Error::Dimension(format!("modulate_tokens: features {fs:?}, gamma {:?}, beta {:?}", tape.shape(gamma), tape.shape(beta))));
    }
    let g = tape.reshape(gamma, &[fs[0], 1, fs[2]])?;
    let b = tape.reshape(beta, &[fs[0], 1, fs[2]])?;
    affine(tape, f, g, b)
}

fn affine(tape: &mut Tape, f: Var, g: Var, b: Var) -> Result<Var> {
    let scale = tape.add_scalar(g, 1.0)?;
    let y = tape.mul(f, scale)?;
    tape.add(y, b)
}
