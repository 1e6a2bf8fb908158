//! Toy pre-norm vision transformer whose weights stay frozen.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Init, Linear, ModuleKind, ParamId, ParamStore, Session};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { image_size: 64, patch_size: 8, depth: 4, width: 64, heads: 4, mlp_ratio: 4 }
    }
}

impl BackboneConfig {
    /// Patch size chosen so the token grid is 1/16 of the image side.
    pub fn paper_ratio() -> Self {
        Self { patch_size: 16, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || self.patch_size == 0 || self.depth == 0 || self.width == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return bad("backbone dimensions must be positive".into());
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!("image_size {} not divisible by patch_size {}", self.image_size, self.patch_size));
        }
        if !self.width.is_multiple_of(self.heads) {
            return bad(format!("width {} not divisible by heads {}", self.width, self.heads));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        4 * self.patch_size * self.patch_size
    }
}

/// Token features on a regular grid, row-major over `(row, col)`.
#[derive(Clone, Copy, Debug)]
pub struct TokenGrid {
    /// `[N, T, D]`
    pub tokens: Var,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl TokenGrid {
    /// Normalized `(x, y)` centre of token `t`.
    pub fn reference_point(&self, t: usize) -> (f64, f64) {
        reference_point(t, self.grid_h, self.grid_w)
    }

    pub fn reference_points(&self) -> Vec<(f64, f64)> {
        (0..self.grid_h * self.grid_w).map(|t| self.reference_point(t)).collect()
    }
}

pub fn reference_point(t: usize, grid_h: usize, grid_w: usize) -> (f64, f64) {
    let (row, col) = (t / grid_w, t % grid_w);
    ((col as f64 + 0.5) / grid_w as f64, (row as f64 + 0.5) / grid_h as f64)
}

#[derive(Clone, Debug)]
struct Block {
    norm1: (ParamId, ParamId),
    qkv: Linear,
    proj: Linear,
    norm2: (ParamId, ParamId),
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    patch_proj: Linear,
    pos_embed: ParamId,
    blocks: Vec<Block>,
    final_norm: (ParamId, ParamId),
}

fn norm_params(store: &mut ParamStore, name: &str, depth: usize, width: usize) -> (ParamId, ParamId) {
    let g = store.add(format!("{name}.gamma"), ModuleKind::Backbone, depth, Tensor::full(&[width], 1.0));
    let b = store.add(format!("{name}.beta"), ModuleKind::Backbone, depth, Tensor::zeros(&[width]));
    (g, b)
}

fn apply_norm(s: &mut Session, x: Var, (g, b): (ParamId, ParamId)) -> Result<Var> {
    let y = s.tape.layer_norm(x, LN_EPS)?;
    let g = s.param(g);
    let b = s.param(b);
    let y = s.tape.mul(y, g)?;
    s.tape.add(y, b)
}

impl Backbone {
    /// Deterministic random initialization into `store`. Block `i` sits at
    /// stage depth `i + 1`; the patch embedding at depth 0.
    pub fn init_frozen(store: &mut ParamStore, config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.width;
        let m = ModuleKind::Backbone;
        let patch_proj = Linear::new(store, "backbone.patch_embed", m, 0, config.patch_dim(), d, Init::LeCun, &mut rng);
        let pos_embed = store.add("backbone.pos_embed", m, 0, Tensor::randn(&[config.tokens(), d], 0.02, &mut rng));
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let p = format!("backbone.block{i}");
            let depth = i + 1;
            blocks.push(Block {
                norm1: norm_params(store, &format!("{p}.norm1"), depth, d),
                qkv: Linear::new(store, &format!("{p}.qkv"), m, depth, d, 3 * d, Init::LeCun, &mut rng),
                proj: Linear::new(store, &format!("{p}.proj"), m, depth, d, d, Init::LeCun, &mut rng),
                norm2: norm_params(store, &format!("{p}.norm2"), depth, d),
                fc1: Linear::new(store, &format!("{p}.fc1"), m, depth, d, config.mlp_ratio * d, Init::LeCun, &mut rng),
                fc2: Linear::new(store, &format!("{p}.fc2"), m, depth, config.mlp_ratio * d, d, Init::LeCun, &mut rng),
            });
        }
        let final_norm = norm_params(store, "backbone.final_norm", config.depth, d);
        Ok(Self { config, patch_proj, pos_embed, blocks, final_norm })
    }

    pub fn depth(&self) -> usize {
        self.config.depth
    }

    pub fn patch_proj(&self) -> &Linear {
        &self.patch_proj
    }

    /// Splits `[N,4,H,W]` into flattened non-overlapping patches `[N,T,4·p·p]`
    /// ordered by `(channel, dy, dx)` within each patch.
    pub fn patchify(&self, s: &mut Session, image: Var) -> Result<Var> {
        let c = &self.config;
        let shape = s.tape.shape(image).to_vec();
        if shape.len() != 4 || shape[1] != 4 || shape[2] != c.image_size || shape[3] != c.image_size {
            return Err(Error::Dimension(format!("patch_embed expects [N,4,{0},{0}], got {shape:?}", c.image_size)));
        }
        let (n, hw, p, g) = (shape[0], c.image_size, c.patch_size, c.grid());
        let mut index = Vec::with_capacity(n * c.tokens() * c.patch_dim());
        for b in 0..n {
            for gy in 0..g {
                for gx in 0..g {
                    for ch in 0..4 {
                        for dy in 0..p {
                            for dx in 0..p {
                                index.push(((b * 4 + ch) * hw + gy * p + dy) * hw + gx * p + dx);
                            }
                        }
                    }
                }
            }
        }
        s.tape.gather(image, index, vec![n, c.tokens(), c.patch_dim()])
    }

    /// Patch projection without positional embedding.
    pub fn project_patches(&self, s: &mut Session, image: Var) -> Result<Var> {
        let patches = self.patchify(s, image)?;
        self.patch_proj.forward(s, patches)
    }

    pub fn patch_embed(&self, s: &mut Session, image: Var) -> Result<TokenGrid> {
        let x = self.project_patches(s, image)?;
        let pos = s.param(self.pos_embed);
        let tokens = s.tape.add(x, pos)?;
        let g = self.config.grid();
        Ok(TokenGrid { tokens, grid_h: g, grid_w: g })
    }

    fn block(&self, i: usize) -> Result<&Block> {
        self.blocks.get(i).ok_or_else(|| Error::Config(format!("block index {i} out of range for depth {}", self.config.depth)))
    }

    /// Post-softmax attention of block `i`, `[N, heads, T, T]`, and the
    /// per-head values `[N, heads, T, D/heads]`.
    fn attention(&self, s: &mut Session, blk: &Block, x: Var) -> Result<(Var, Var)> {
        let shape = s.tape.shape(x).to_vec();
        let (n, t, d) = (shape[0], shape[1], shape[2]);
        let h = self.config.heads;
        let dh = d / h;
        let xn = apply_norm(s, x, blk.norm1)?;
        let qkv = blk.qkv.forward(s, xn)?;
        let qkv = s.tape.reshape(qkv, &[n, t, 3, h, dh])?;
        let qkv = s.tape.permute(qkv, &[2, 0, 3, 1, 4])?;
        let mut parts = [Var(0); 3];
        for (j, part) in parts.iter_mut().enumerate() {
            let v = s.tape.narrow(qkv, 0, j, 1)?;
            *part = s.tape.reshape(v, &[n, h, t, dh])?;
        }
        let [q, k, v] = parts;
        let scores = s.tape.matmul_bt(q, k)?;
        let scores = s.tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let attn = s.tape.softmax(scores, 3)?;
        Ok((attn, v))
    }

    pub fn attention_weights(&self, s: &mut Session, i: usize, tokens: &TokenGrid) -> Result<Var> {
        let blk = self.block(i)?.clone();
        Ok(self.attention(s, &blk, tokens.tokens)?.0)
    }

    pub fn run_block(&self, s: &mut Session, i: usize, tokens: &TokenGrid) -> Result<TokenGrid> {
        let blk = self.block(i)?.clone();
        let x = tokens.tokens;
        let shape = s.tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.config.width {
            return Err(Error::Dimension(format!("tokens must be [N,T,{}], got {shape:?}", self.config.width)));
        }
        let (n, t, d) = (shape[0], shape[1], shape[2]);
        let (attn, v) = self.attention(s, &blk, x)?;
        let ctx = s.tape.matmul(attn, v)?;
        let ctx = s.tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = s.tape.reshape(ctx, &[n, t, d])?;
        let y = blk.proj.forward(s, ctx)?;
        let x = s.tape.add(x, y)?;
        let xn = apply_norm(s, x, blk.norm2)?;
        let hdn = blk.fc1.forward(s, xn)?;
        let hdn = s.tape.gelu(hdn)?;
        let y = blk.fc2.forward(s, hdn)?;
        let out = s.tape.add(x, y)?;
        Ok(TokenGrid { tokens: out, ..*tokens })
    }

    pub fn final_norm(&self, s: &mut Session, tokens: &TokenGrid) -> Result<TokenGrid> {
        let x = apply_norm(s, tokens.tokens, self.final_norm)?;
        Ok(TokenGrid { tokens: x, ..*tokens })
    }
}
