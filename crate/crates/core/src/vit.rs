//! Vision Transformer backbone.
//!
//! Patch projection (conv with kernel = stride = patch size), learned CLS token
//! and positional embeddings, pre-norm encoder blocks, final layer norm, and a
//! CLS pooler `tanh(dense(cls))`.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numerics::nn::{trunc_normal, Conv2d, Init, LayerNorm, Linear};
use crate::numerics::{Graph, ParamStore, Real, Var};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub in_channels: usize,
    /// Applied to embeddings and to each residual branch; 0 disables it.
    pub dropout_p: f64,
}

impl ViTConfig {
    pub fn paper() -> Self {
        Self {
            d_model: 1024,
            n_layers: 24,
            n_heads: 16,
            d_mlp: 4096,
            patch_size: 14,
            image_size: 224,
            in_channels: 3,
            dropout_p: 0.0,
        }
    }

    pub fn toy() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            d_mlp: 256,
            patch_size: 14,
            image_size: 56,
            in_channels: 3,
            dropout_p: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "vit.d_model {} must be divisible by vit.n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "vit.image_size {} must be divisible by vit.patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.d_mlp == 0 || self.in_channels == 0 {
            return Err(Error::Config("vit.d_mlp and vit.in_channels must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("vit.dropout_p must be in [0, 1), got {}", self.dropout_p)));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch tokens plus CLS.
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid() + 1
    }

    /// Trainable scalars, computed from the configuration alone.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let patch = self.in_channels * self.patch_size * self.patch_size * d + d;
        let block = 2 * (2 * d) + 4 * (d * d + d) + (d * self.d_mlp + self.d_mlp) + (self.d_mlp * d + d);
        patch + d + self.tokens() * d + self.n_layers * block + 2 * d + (d * d + d)
    }
}

/// Separate query, key and value projections, attention, output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(prefix: &str, d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::Config(format!("d_model {d_model} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(&format!("{prefix}.query"), d_model, d_model),
            k: Linear::new(&format!("{prefix}.key"), d_model, d_model),
            v: Linear::new(&format!("{prefix}.value"), d_model, d_model),
            out: Linear::new(&format!("{prefix}.out"), d_model, d_model),
            heads,
        })
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
        for l in [&self.q, &self.k, &self.v] {
            l.init(store, Init::TruncNormal(INIT_STD), rng)?;
        }
        self.out.init(store, Init::Zeros, rng)
    }

    pub fn num_params(&self) -> usize {
        4 * self.q.num_params()
    }

    /// `[B,T,D]` -> `[B,T,D]`
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 3 || s[2] != self.q.inputs {
            return Err(dim_err!("attention expects [B,T,{}], got {:?}", self.q.inputs, s));
        }
        let q = self.q.forward(g, store, x)?;
        let k = self.k.forward(g, store, x)?;
        let v = self.v.forward(g, store, x)?;
        let a = g.attention(q, k, v, self.heads)?;
        self.out.forward(g, store, a)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub dropout_p: f64,
}

impl EncoderBlock {
    pub fn new(prefix: &str, cfg: &ViTConfig) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(&format!("{prefix}.ln1"), cfg.d_model),
            attn: MultiHeadAttention::new(&format!("{prefix}.attn"), cfg.d_model, cfg.n_heads)?,
            ln2: LayerNorm::new(&format!("{prefix}.ln2"), cfg.d_model),
            fc1: Linear::new(&format!("{prefix}.mlp.fc1"), cfg.d_model, cfg.d_mlp),
            fc2: Linear::new(&format!("{prefix}.mlp.fc2"), cfg.d_mlp, cfg.d_model),
            dropout_p: cfg.dropout_p,
        })
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
        self.ln1.init(store)?;
        self.attn.init(store, rng)?;
        self.ln2.init(store)?;
        self.fc1.init(store, Init::TruncNormal(INIT_STD), rng)?;
        self.fc2.init(store, Init::Zeros, rng)
    }

    pub fn num_params(&self) -> usize {
        self.ln1.num_params() + self.attn.num_params() + self.ln2.num_params() + self.fc1.num_params() + self.fc2.num_params()
    }

    /// `x + attn(ln1(x))`, then `x + fc2(gelu(fc1(ln2(x))))`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.ln1.forward(g, store, x)?;
        let h = self.attn.forward(g, store, h)?;
        let h = g.dropout(h, self.dropout_p)?;
        let x = g.add(x, h)?;
        let h = self.ln2.forward(g, store, x)?;
        let h = self.fc1.forward(g, store, h)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, store, h)?;
        let h = g.dropout(h, self.dropout_p)?;
        g.add(x, h)
    }
}

#[derive(Clone, Debug)]
pub struct ViT {
    pub config: ViTConfig,
    patch: Conv2d,
    cls: String,
    pos: String,
    blocks: Vec<EncoderBlock>,
    norm: LayerNorm,
    pooler: Linear,
}

impl ViT {
    pub fn new(prefix: &str, config: ViTConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let blocks = (0..config.n_layers)
            .map(|i| EncoderBlock::new(&format!("{prefix}.blocks.{i}"), &config))
            .collect::<Result<_>>()?;
        Ok(Self {
            patch: Conv2d::new(&format!("{prefix}.patch"), config.in_channels, d, config.patch_size, config.patch_size, 0),
            cls: format!("{prefix}.cls"),
            pos: format!("{prefix}.pos"),
            blocks,
            norm: LayerNorm::new(&format!("{prefix}.norm"), d),
            pooler: Linear::new(&format!("{prefix}.pooler"), d, d),
            config,
        })
    }

    pub fn blocks(&self) -> &[EncoderBlock] {
        &self.blocks
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
        let d = self.config.d_model;
        self.patch.init(store, Init::TruncNormal(INIT_STD), rng)?;
        store.register(&self.cls, trunc_normal(&[1, d], INIT_STD, rng))?;
        store.register(&self.pos, trunc_normal(&[self.config.tokens(), d], INIT_STD, rng))?;
        for b in &self.blocks {
            b.init(store, rng)?;
        }
        self.norm.init(store)?;
        self.pooler.init(store, Init::TruncNormal(INIT_STD), rng)
    }

    pub fn num_params(&self) -> usize {
        let d = self.config.d_model;
        self.patch.num_params()
            + d
            + self.config.tokens() * d
            + self.blocks.iter().map(EncoderBlock::num_params).sum::<usize>()
            + self.norm.num_params()
            + self.pooler.num_params()
    }

    /// `[B,C,S,S]` -> tokens `[B,(S/p)^2+1,D]`: CLS first, then patches in
    /// row-major order, positional embeddings added.
    pub fn patch_embed<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, images: Var) -> Result<Var> {
        let s = g.shape(images).to_vec();
        let (p, d) = (self.config.patch_size, self.config.d_model);
        if s.len() != 4 || s[1] != self.config.in_channels {
            return Err(dim_err!("vit expects [B,{},S,S], got {:?}", self.config.in_channels, s));
        }
        if s[2] != self.config.image_size || s[3] != self.config.image_size || !s[2].is_multiple_of(p) {
            return Err(dim_err!(
                "vit expects {0}x{0} images divisible by patch {p}, got {1}x{2}",
                self.config.image_size,
                s[2],
                s[3]
            ));
        }
        let b = s[0];
        let n = self.config.grid() * self.config.grid();
        let grid = self.patch.forward(g, store, images)?;
        // [B,D,n] -> [B,n,D]
        let index: Vec<usize> = (0..b)
            .flat_map(|i| (0..n).flat_map(move |t| (0..d).map(move |c| (i * d + c) * n + t)))
            .collect();
        let patches = g.gather(grid, Arc::new(index), &[b, n, d])?;
        let cls = g.param(store, &self.cls)?;
        let cls = g.gather(cls, Arc::new((0..b * d).map(|i| i % d).collect()), &[b, 1, d])?;
        let tokens = g.concat(&[cls, patches], 1)?;
        let pos = g.param(store, &self.pos)?;
        let tokens = g.add_bias(tokens, pos)?;
        g.dropout(tokens, self.config.dropout_p)
    }

    /// Encoder blocks then final layer norm.
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, tokens: Var) -> Result<Var> {
        let mut x = tokens;
        for b in &self.blocks {
            x = b.forward(g, store, x)?;
        }
        self.norm.forward(g, store, x)
    }

    /// `tanh(dense(cls))` -> `[B,D]`
    pub fn pool<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, encoded: Var) -> Result<Var> {
        let s = g.shape(encoded).to_vec();
        let (b, t, d) = (s[0], s[1], s[2]);
        let cls = g.gather(encoded, Arc::new((0..b).flat_map(|i| (0..d).map(move |c| i * t * d + c)).collect()), &[b, d])?;
        let h = self.pooler.forward(g, store, cls)?;
        Ok(g.tanh(h))
    }

    /// `[B,C,S,S]` -> context `[B,D]` with every entry in (-1, 1).
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, images: Var) -> Result<Var> {
        let tokens = self.patch_embed(g, store, images)?;
        let encoded = self.encode(g, store, tokens)?;
        self.pool(g, store, encoded)
    }
}
