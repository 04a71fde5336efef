//! ViT-style feature extractor whose attention/FFN projections accept
//! runtime low-rank amendments (per-image batched side paths).

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{linear, Linear, Module, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_ops::{bilinear_resize, l2_normalize};

pub const PATCH_SIZE: usize = 16;
/// flattened 16x16x3 patch
pub const PATCH_DIM: usize = PATCH_SIZE * PATCH_SIZE * 3;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    /// native input side; positional embeddings are interpolated otherwise
    pub image_size: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        // desk-scale; a full ViT-B would be depth 12, dim 768
        Self {
            depth: 4,
            dim: 128,
            heads: 4,
            mlp_ratio: 4.0,
            image_size: 224,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.image_size == 0 || self.image_size % PATCH_SIZE != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of {PATCH_SIZE}",
                self.image_size
            )));
        }
        if self.depth == 0 {
            return Err(Error::Config("depth must be >= 1".into()));
        }
        Ok(())
    }

    pub fn mlp_dim(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn grid(&self) -> usize {
        self.image_size / PATCH_SIZE
    }
}

/// One generated low-rank pair, batched per image: `a: [B, out, r]`,
/// `b: [B, r, in]`. The merged effective weight is `W + scale * a @ b`.
#[derive(Debug, Clone)]
pub struct LowRankDelta {
    pub a: Tensor,
    pub b: Tensor,
    pub scale: f64,
}

impl LowRankDelta {
    pub fn rank(&self) -> usize {
        self.a.dims()[2]
    }

    fn check(&self, layer: &str, batch: usize, d_out: usize, d_in: usize) -> Result<()> {
        let (ab, ao, ar) = self
            .a
            .dims3()
            .map_err(|e| Error::AdapterShape { layer: layer.into(), reason: e.to_string() })?;
        let (bb, br, bi) = self
            .b
            .dims3()
            .map_err(|e| Error::AdapterShape { layer: layer.into(), reason: e.to_string() })?;
        if ab != batch || bb != batch || ao != d_out || bi != d_in || ar != br {
            return Err(Error::AdapterShape {
                layer: layer.into(),
                reason: format!(
                    "expected a [{batch}, {d_out}, r], b [{batch}, r, {d_in}]; got a {:?}, b {:?}",
                    self.a.dims(),
                    self.b.dims()
                ),
            });
        }
        Ok(())
    }
}

/// Adapter pairs for one transformer block.
#[derive(Debug, Clone)]
pub struct BlockAdapters {
    pub q: LowRankDelta,
    pub k: LowRankDelta,
    pub v: LowRankDelta,
    pub o: LowRankDelta,
    pub fc1: LowRankDelta,
    pub fc2: LowRankDelta,
}

/// Per-layer generated low-rank parameters for the whole backbone.
#[derive(Debug, Clone)]
pub struct AdapterBundle {
    pub blocks: Vec<BlockAdapters>,
}

impl AdapterBundle {
    pub fn validate(&self, cfg: &BackboneConfig, batch: usize) -> Result<()> {
        if self.blocks.len() != cfg.depth {
            return Err(Error::AdapterShape {
                layer: "bundle".into(),
                reason: format!("{} block adapters for depth {}", self.blocks.len(), cfg.depth),
            });
        }
        let d = cfg.dim;
        let m = cfg.mlp_dim();
        for (i, b) in self.blocks.iter().enumerate() {
            b.q.check(&format!("blocks.{i}.attn.q"), batch, d, d)?;
            b.k.check(&format!("blocks.{i}.attn.k"), batch, d, d)?;
            b.v.check(&format!("blocks.{i}.attn.v"), batch, d, d)?;
            b.o.check(&format!("blocks.{i}.attn.o"), batch, d, d)?;
            b.fc1.check(&format!("blocks.{i}.mlp.fc1"), batch, m, d)?;
            b.fc2.check(&format!("blocks.{i}.mlp.fc2"), batch, d, m)?;
        }
        Ok(())
    }
}

/// Linear projection with an optional per-image low-rank side path.
#[derive(Debug)]
pub struct LoraLinear {
    inner: Linear,
}

impl LoraLinear {
    pub fn new(d_in: usize, d_out: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self { inner: linear(d_in, d_out, vb)? })
    }

    pub fn weight(&self) -> &Tensor {
        self.inner.weight()
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.inner.bias()
    }

    /// `x: [B, T, in]`, delta side path is algebraically identical to
    /// forwarding through `W + scale * a @ b`.
    pub fn forward(&self, x: &Tensor, delta: Option<&LowRankDelta>) -> Result<Tensor> {
        let base = self.inner.forward(x)?;
        match delta {
            None => Ok(base),
            Some(d) => {
                let low = x.matmul(&d.b.transpose(1, 2)?.contiguous()?)?;
                let side = low.matmul(&d.a.transpose(1, 2)?.contiguous()?)?;
                Ok((base + side.affine(d.scale, 0.0)?)?)
            }
        }
    }
}

/// Layer normalization over the last axis, built from primitive ops so the
/// backward graph stays intact (the fused kernel does not track gradients).
#[derive(Debug)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            weight: vb.get_with_hints(dim, "weight", candle_nn::init::Init::Const(1.0))?,
            bias: vb.get_with_hints(dim, "bias", candle_nn::init::Init::Const(0.0))?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&var.affine(1.0, self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)?)
    }
}

#[derive(Debug)]
struct Attention {
    q: LoraLinear,
    k: LoraLinear,
    v: LoraLinear,
    o: LoraLinear,
    heads: usize,
}

impl Attention {
    fn new(dim: usize, heads: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            q: LoraLinear::new(dim, dim, vb.pp("q"))?,
            k: LoraLinear::new(dim, dim, vb.pp("k"))?,
            v: LoraLinear::new(dim, dim, vb.pp("v"))?,
            o: LoraLinear::new(dim, dim, vb.pp("o"))?,
            heads,
        })
    }

    fn forward(&self, x: &Tensor, ad: Option<&BlockAdapters>) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let dh = d / self.heads;
        let split = |t_: Tensor| -> Result<Tensor> {
            Ok(t_.reshape((b, t, self.heads, dh))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(x, ad.map(|a| &a.q))?)?;
        let k = split(self.k.forward(x, ad.map(|a| &a.k))?)?;
        let v = split(self.v.forward(x, ad.map(|a| &a.v))?)?;

        let scale = 1.0 / (dh as f64).sqrt();
        let att = q.matmul(&k.transpose(2, 3)?.contiguous()?)?.affine(scale, 0.0)?;
        let att = candle_nn::ops::softmax(&att, D::Minus1)?;
        let out = att.matmul(&v)?; // [b, heads, t, dh]
        let out = out.transpose(1, 2)?.contiguous()?.reshape((b, t, d))?;
        self.o.forward(&out, ad.map(|a| &a.o))
    }
}

#[derive(Debug)]
struct Mlp {
    fc1: LoraLinear,
    fc2: LoraLinear,
}

impl Mlp {
    fn forward(&self, x: &Tensor, ad: Option<&BlockAdapters>) -> Result<Tensor> {
        let h = self.fc1.forward(x, ad.map(|a| &a.fc1))?.gelu_erf()?;
        self.fc2.forward(&h, ad.map(|a| &a.fc2))
    }
}

#[derive(Debug)]
struct Block {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl Block {
    fn new(cfg: &BackboneConfig, vb: VarBuilder) -> Result<Self> {
        let d = cfg.dim;
        Ok(Self {
            ln1: LayerNorm::new(d, vb.pp("ln1"))?,
            attn: Attention::new(d, cfg.heads, vb.pp("attn"))?,
            ln2: LayerNorm::new(d, vb.pp("ln2"))?,
            mlp: Mlp {
                fc1: LoraLinear::new(d, cfg.mlp_dim(), vb.pp("mlp").pp("fc1"))?,
                fc2: LoraLinear::new(cfg.mlp_dim(), d, vb.pp("mlp").pp("fc2"))?,
            },
        })
    }

    fn forward(&self, x: &Tensor, ad: Option<&BlockAdapters>) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.ln1.forward(x)?, ad)?)?;
        let x = (&x + self.mlp.forward(&self.ln2.forward(&x)?, ad)?)?;
        Ok(x)
    }
}

/// Splits `[B, 3, H, W]` into raster-ordered flattened 16x16 patches
/// `[B, h*w, 768]` (channel-major within a patch).
pub fn patchify(images: &Tensor) -> Result<Tensor> {
    let (b, c, hh, ww) = images.dims4()?;
    if c != 3 {
        return Err(Error::Config(format!("expected 3 channels, got {c}")));
    }
    if hh % PATCH_SIZE != 0 || ww % PATCH_SIZE != 0 {
        return Err(Error::Config(format!(
            "image sides must be multiples of {PATCH_SIZE}, got {hh}x{ww}"
        )));
    }
    let (h, w) = (hh / PATCH_SIZE, ww / PATCH_SIZE);
    let x = images.reshape((b, 3, h, PATCH_SIZE, w, PATCH_SIZE))?;
    let x = x.permute((0, 2, 4, 1, 3, 5))?.contiguous()?;
    Ok(x.reshape((b, h * w, PATCH_DIM))?)
}

#[derive(Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    patch_embed: Linear,
    pos_embed: Tensor,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig, vb: VarBuilder) -> Result<Self> {
        cfg.validate()?;
        let g = cfg.grid();
        let pos_embed = vb.get_with_hints(
            (1, g * g, cfg.dim),
            "pos_embed",
            candle_nn::init::Init::Randn { mean: 0.0, stdev: 0.02 },
        )?;
        let patch_embed = linear(PATCH_DIM, cfg.dim, vb.pp("patch_embed"))?;
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(&cfg, vb.pp("blocks").pp(i.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(cfg.dim, vb.pp("norm"))?;
        Ok(Self { cfg, patch_embed, pos_embed, blocks, norm })
    }

    pub fn device(&self) -> &Device {
        self.pos_embed.device()
    }

    pub fn dtype(&self) -> DType {
        self.pos_embed.dtype()
    }

    /// Positional embeddings for an `h x w` token grid, bilinearly
    /// interpolated from the native grid when sizes differ.
    fn positional(&self, h: usize, w: usize) -> Result<Tensor> {
        let g = self.cfg.grid();
        if h == g && w == g {
            return Ok(self.pos_embed.clone());
        }
        let d = self.cfg.dim;
        let grid = self.pos_embed.reshape((1, g, g, d))?.permute((0, 3, 1, 2))?.contiguous()?;
        let resized = bilinear_resize(&grid, h, w)?;
        Ok(resized.permute((0, 2, 3, 1))?.contiguous()?.reshape((1, h * w, d))?)
    }

    /// Token-space forward: `[B, 3, H, W] -> [B, h*w, dim]`.
    pub fn forward_tokens(&self, images: &Tensor, adapters: Option<&AdapterBundle>) -> Result<Tensor> {
        let (b, _c, hh, ww) = images.dims4()?;
        if let Some(ad) = adapters {
            ad.validate(&self.cfg, b)?;
        }
        let (h, w) = (hh / PATCH_SIZE, ww / PATCH_SIZE);
        let patches = patchify(images)?;
        let mut x = self.patch_embed.forward(&patches)?;
        x = x.broadcast_add(&self.positional(h, w)?)?;
        for (i, blk) in self.blocks.iter().enumerate() {
            x = blk.forward(&x, adapters.map(|a| &a.blocks[i]))?;
        }
        self.norm.forward(&x).map_err(Into::into)
    }

    /// `[B, 3, H, W] -> [B, dim, h, w]` feature maps.
    pub fn extract_features(&self, images: &Tensor, adapters: Option<&AdapterBundle>) -> Result<Tensor> {
        let (b, _c, hh, ww) = images.dims4()?;
        let (h, w) = (hh / PATCH_SIZE, ww / PATCH_SIZE);
        let tokens = self.forward_tokens(images, adapters)?;
        Ok(tokens.transpose(1, 2)?.contiguous()?.reshape((b, self.cfg.dim, h, w))?)
    }

    /// Base weights of every adapter-targeted layer, keyed by layer name.
    /// Used by the merge-equivalence harness.
    pub fn targeted_weights(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.attn.q"), b.attn.q.weight()));
            out.push((format!("blocks.{i}.attn.k"), b.attn.k.weight()));
            out.push((format!("blocks.{i}.attn.v"), b.attn.v.weight()));
            out.push((format!("blocks.{i}.attn.o"), b.attn.o.weight()));
            out.push((format!("blocks.{i}.mlp.fc1"), b.mlp.fc1.weight()));
            out.push((format!("blocks.{i}.mlp.fc2"), b.mlp.fc2.weight()));
        }
        out
    }
}

/// Spatial mean of a `[B, dim, h, w]` feature map, before normalization.
pub fn pool_global_prenorm(fmap: &Tensor) -> Result<Tensor> {
    let (b, d, h, w) = fmap.dims4()?;
    Ok(fmap.reshape((b, d, h * w))?.mean(D::Minus1)?)
}

/// L2-normalized global identity feature `[B, dim]`.
pub fn pool_global(fmap: &Tensor) -> Result<Tensor> {
    l2_normalize(&pool_global_prenorm(fmap)?)
}

/// Scan embedding: mean of per-slice prenorm pooled features, then
/// L2-normalized. `slice_feats: [S, dim]` prenorm pooled features.
pub fn embed_scan_from_pooled(slice_feats: &Tensor) -> Result<Tensor> {
    let (s, _d) = slice_feats.dims2()?;
    if s == 0 {
        return Err(Error::other("embed_scan: empty slice list"));
    }
    let mean = slice_feats.mean(0)?;
    Ok(l2_normalize(&mean.unsqueeze(0)?)?.squeeze(0)?)
}
