//! Continuous modality-based parameter adapter: a continuous modality
//! representation computed from raw patches, and hypernetworks (Att-PNet /
//! FFN-PNet) that predict per-image low-rank parameters for every attention
//! and FFN projection of the backbone.

use candle_core::{Tensor, D};
use candle_nn::{linear, Linear, Module, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::backbone::{patchify, AdapterBundle, BackboneConfig, BlockAdapters, LowRankDelta, PATCH_DIM};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModalityMode {
    /// no adapter generation at all (modality-agnostic backbone)
    None,
    /// one-hot dataset modality label in place of the predicted w
    Discrete,
    /// continuous modality context mapped straight to M (no codebook)
    ContinuousNoCodebook,
    /// full design: softmax weights over a learnable codebook
    #[default]
    ContinuousCodebook,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct CompaConfig {
    /// number of pseudo modalities L
    pub codebook_size: usize,
    /// modality feature dimension (desk scale: backbone dim)
    pub d_m: usize,
    pub rank: usize,
    pub groups: usize,
    pub mode: ModalityMode,
    /// number of dataset-level modality labels (used by `Discrete`)
    pub n_dataset_modalities: usize,
}

impl Default for CompaConfig {
    fn default() -> Self {
        Self {
            codebook_size: 32,
            d_m: 128,
            rank: 16,
            groups: 64,
            mode: ModalityMode::ContinuousCodebook,
            n_dataset_modalities: 2,
        }
    }
}

impl CompaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_m == 0 || self.rank == 0 {
            return Err(Error::Config("d_m and rank must be positive".into()));
        }
        if self.groups == 0 || self.d_m % self.groups != 0 {
            return Err(Error::Config(format!(
                "d_m {} must be divisible by group count {}",
                self.d_m, self.groups
            )));
        }
        if self.codebook_size == 0 {
            return Err(Error::Config("codebook_size must be positive".into()));
        }
        Ok(())
    }

    /// adapter scale; rank-independent perturbation magnitude
    pub fn scale(&self) -> f64 {
        1.0 / self.rank as f64
    }
}

/// Per-image modality encoding: probability vector `w: [B, L]` (absent in
/// the no-codebook variant) and continuous modality feature `m: [B, d_m]`.
#[derive(Debug, Clone)]
pub struct ModalityEncoding {
    pub w: Option<Tensor>,
    pub m: Tensor,
}

/// Computes w and M from raw patches, independent of the backbone weights.
#[derive(Debug)]
pub struct ModalityEncoder {
    cfg: CompaConfig,
    ctx1: Linear,
    ctx2: Linear,
    ctx3: Linear,
    w1: Linear,
    w2: Linear,
    direct: Option<Linear>,
    codebook: Option<Tensor>,
}

impl ModalityEncoder {
    pub fn new(cfg: CompaConfig, vb: VarBuilder) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_m;
        let l = match cfg.mode {
            ModalityMode::Discrete => cfg.n_dataset_modalities,
            _ => cfg.codebook_size,
        };
        let direct = match cfg.mode {
            ModalityMode::ContinuousNoCodebook => Some(linear(d, d, vb.pp("direct"))?),
            _ => None,
        };
        let codebook = match cfg.mode {
            ModalityMode::ContinuousNoCodebook | ModalityMode::None => None,
            _ => Some(vb.get_with_hints(
                (l, d),
                "codebook",
                candle_nn::init::Init::Randn { mean: 0.0, stdev: 0.02 },
            )?),
        };
        Ok(Self {
            cfg,
            ctx1: linear(PATCH_DIM, d, vb.pp("ctx1"))?,
            ctx2: linear(d, d, vb.pp("ctx2"))?,
            ctx3: linear(d, d, vb.pp("ctx3"))?,
            w1: linear(d, d, vb.pp("w1"))?,
            w2: linear(d, l, vb.pp("w2"))?,
            direct,
            codebook,
        })
    }

    pub fn codebook(&self) -> Option<&Tensor> {
        self.codebook.as_ref()
    }

    /// Per-patch MLP on flattened raw patches: `[B, 3, H, W] -> [B, h*w, d_m]`.
    pub fn local_modality_context(&self, images: &Tensor) -> Result<Tensor> {
        let patches = patchify(images)?;
        let x = self.ctx1.forward(&patches)?.gelu_erf()?;
        let x = self.ctx2.forward(&x)?.gelu_erf()?;
        Ok(self.ctx3.forward(&x)?)
    }

    /// Mean over patches: `[B, h*w, d_m] -> [B, d_m]`.
    pub fn global_modality_context(&self, contexts: &Tensor) -> Result<Tensor> {
        Ok(contexts.mean(1)?)
    }

    /// Modality probability vector: 2-layer MLP + softmax, `[B, L]`.
    pub fn modality_weights(&self, global_context: &Tensor) -> Result<Tensor> {
        let logits = self.w2.forward(&self.w1.forward(global_context)?.gelu_erf()?)?;
        Ok(candle_nn::ops::softmax(&logits, D::Minus1)?)
    }

    /// `M = w @ codebook`, exactly linear in w.
    pub fn modality_feature(&self, w: &Tensor) -> Result<Tensor> {
        let cb = self
            .codebook
            .as_ref()
            .ok_or_else(|| Error::Config("modality_feature requires a codebook".into()))?;
        Ok(w.matmul(cb)?)
    }

    /// Full encoding. `dataset_modalities` (one index per image) is consulted
    /// only in `Discrete` mode.
    pub fn encode(&self, images: &Tensor, dataset_modalities: Option<&[usize]>) -> Result<ModalityEncoding> {
        match self.cfg.mode {
            ModalityMode::None => Err(Error::Config("encoder disabled (mode = none)".into())),
            ModalityMode::Discrete => {
                let idx = dataset_modalities.ok_or_else(|| {
                    Error::Config("discrete modality mode requires dataset modality indices".into())
                })?;
                let b = images.dims4()?.0;
                if idx.len() != b {
                    return Err(Error::Config("modality index count != batch size".into()));
                }
                let l = self.cfg.n_dataset_modalities;
                let mut onehot = vec![0f32; b * l];
                for (i, &m) in idx.iter().enumerate() {
                    if m >= l {
                        return Err(Error::Config(format!("modality index {m} out of range {l}")));
                    }
                    onehot[i * l + m] = 1.0;
                }
                let w = Tensor::from_vec(onehot, (b, l), images.device())?.to_dtype(images.dtype())?;
                let m = self.modality_feature(&w)?;
                Ok(ModalityEncoding { w: Some(w), m })
            }
            ModalityMode::ContinuousNoCodebook => {
                let ctx = self.local_modality_context(images)?;
                let g = self.global_modality_context(&ctx)?;
                let m = self
                    .direct
                    .as_ref()
                    .expect("direct head exists in no-codebook mode")
                    .forward(&g.gelu_erf()?)?;
                Ok(ModalityEncoding { w: None, m })
            }
            ModalityMode::ContinuousCodebook => {
                let ctx = self.local_modality_context(images)?;
                let g = self.global_modality_context(&ctx)?;
                let w = self.modality_weights(&g)?;
                let m = self.modality_feature(&w)?;
                Ok(ModalityEncoding { w: Some(w), m })
            }
        }
    }
}

/// Block-diagonal linear map: input and output channels partitioned into G
/// groups, cutting the parameter count by a factor of G.
#[derive(Debug)]
pub struct GroupedLinear {
    weight: Tensor, // [G, out_g, in_g]
    bias: Tensor,   // [out]
    groups: usize,
}

impl GroupedLinear {
    pub fn new(d_in: usize, d_out: usize, groups: usize, vb: VarBuilder) -> Result<Self> {
        if d_in % groups != 0 || d_out % groups != 0 {
            return Err(Error::Config(format!(
                "grouped linear: in {d_in} and out {d_out} must be divisible by groups {groups}"
            )));
        }
        let weight = vb.get_with_hints(
            (groups, d_out / groups, d_in / groups),
            "weight",
            candle_nn::init::Init::Const(0.0),
        )?;
        let bias = vb.get_with_hints((d_out,), "bias", candle_nn::init::Init::Const(0.0))?;
        Ok(Self { weight, bias, groups })
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.elem_count() + self.bias.elem_count()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, d_in) = x.dims2()?;
        let in_g = d_in / self.groups;
        let xg = x.reshape((b, self.groups, in_g, 1))?;
        let y = self.weight.broadcast_matmul(&xg)?; // [b, G, out_g, 1]
        let out = y.reshape((b, self.weight.dims()[1] * self.groups))?;
        Ok(out.broadcast_add(&self.bias)?)
    }
}

/// One predicted (A, B) slot in the flat PNet output.
#[derive(Debug, Clone, Copy)]
struct Slot {
    d_out: usize,
    d_in: usize,
    offset: usize,
}

impl Slot {
    fn len(&self, r: usize) -> usize {
        r * (self.d_out + self.d_in)
    }
}

#[derive(Debug)]
struct PNet {
    hidden: Linear,
    last: GroupedLinear,
}

impl PNet {
    fn new(d_m: usize, out_total: usize, groups: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            hidden: linear(d_m, d_m, vb.pp("hidden"))?,
            last: GroupedLinear::new(d_m, out_total, groups, vb.pp("last"))?,
        })
    }

    fn forward(&self, m: &Tensor) -> Result<Tensor> {
        self.last.forward(&self.hidden.forward(m)?.gelu_erf()?)
    }
}

/// Att-PNet + FFN-PNet: maps the continuous modality feature `M` to one
/// low-rank pair per targeted backbone layer.
#[derive(Debug)]
pub struct AdapterGenerator {
    cfg: CompaConfig,
    backbone: BackboneConfig,
    att_pnet: PNet,
    ffn_pnet: PNet,
    att_slots: Vec<Slot>, // q, k, v, o per block
    ffn_slots: Vec<Slot>, // fc1, fc2 per block
}

impl AdapterGenerator {
    pub fn new(cfg: CompaConfig, backbone: BackboneConfig, vb: VarBuilder) -> Result<Self> {
        cfg.validate()?;
        let r = cfg.rank;
        let d = backbone.dim;
        let m = backbone.mlp_dim();

        let mut att_slots = Vec::new();
        let mut att_total = 0;
        let mut ffn_slots = Vec::new();
        let mut ffn_total = 0;
        for _ in 0..backbone.depth {
            for _ in 0..4 {
                let s = Slot { d_out: d, d_in: d, offset: att_total };
                att_total += s.len(r);
                att_slots.push(s);
            }
            let s1 = Slot { d_out: m, d_in: d, offset: ffn_total };
            ffn_total += s1.len(r);
            ffn_slots.push(s1);
            let s2 = Slot { d_out: d, d_in: m, offset: ffn_total };
            ffn_total += s2.len(r);
            ffn_slots.push(s2);
        }
        if att_total % cfg.groups != 0 || ffn_total % cfg.groups != 0 {
            return Err(Error::Config(format!(
                "PNet output sizes ({att_total}, {ffn_total}) must be divisible by groups {}",
                cfg.groups
            )));
        }

        Ok(Self {
            att_pnet: PNet::new(cfg.d_m, att_total, cfg.groups, vb.pp("att_pnet"))?,
            ffn_pnet: PNet::new(cfg.d_m, ffn_total, cfg.groups, vb.pp("ffn_pnet"))?,
            cfg,
            backbone,
            att_slots,
            ffn_slots,
        })
    }

    /// Weight parameter count of the two grouped last layers, for the
    /// group-reduction check.
    pub fn last_layer_weight_params(&self) -> usize {
        self.att_pnet.last.parameter_count() - self.att_pnet.last.bias_len()
            + self.ffn_pnet.last.parameter_count()
            - self.ffn_pnet.last.bias_len()
    }

    fn slice_delta(&self, flat: &Tensor, slot: &Slot) -> Result<LowRankDelta> {
        let r = self.cfg.rank;
        let b = flat.dims2()?.0;
        let a_len = slot.d_out * r;
        let a = flat
            .narrow(1, slot.offset, a_len)?
            .reshape((b, slot.d_out, r))?
            .contiguous()?;
        let bmat = flat
            .narrow(1, slot.offset + a_len, r * slot.d_in)?
            .reshape((b, r, slot.d_in))?
            .contiguous()?;
        Ok(LowRankDelta { a, b: bmat, scale: self.cfg.scale() })
    }

    /// Generates one bundle per image in the batch: `m: [B, d_m]`.
    pub fn generate(&self, m: &Tensor) -> Result<AdapterBundle> {
        let att = self.att_pnet.forward(m)?;
        let ffn = self.ffn_pnet.forward(m)?;
        let mut blocks = Vec::with_capacity(self.backbone.depth);
        for i in 0..self.backbone.depth {
            let q = self.slice_delta(&att, &self.att_slots[4 * i])?;
            let k = self.slice_delta(&att, &self.att_slots[4 * i + 1])?;
            let v = self.slice_delta(&att, &self.att_slots[4 * i + 2])?;
            let o = self.slice_delta(&att, &self.att_slots[4 * i + 3])?;
            let fc1 = self.slice_delta(&ffn, &self.ffn_slots[2 * i])?;
            let fc2 = self.slice_delta(&ffn, &self.ffn_slots[2 * i + 1])?;
            blocks.push(BlockAdapters { q, k, v, o, fc1, fc2 });
        }
        Ok(AdapterBundle { blocks })
    }
}

impl GroupedLinear {
    fn bias_len(&self) -> usize {
        self.bias.elem_count()
    }
}

/// Effective weight for one image: `W + scale * A_i @ B_i`.
pub fn merge_effective_weight(base: &Tensor, delta: &LowRankDelta, image: usize) -> Result<Tensor> {
    let a = delta.a.narrow(0, image, 1)?.squeeze(0)?.contiguous()?;
    let b = delta.b.narrow(0, image, 1)?.squeeze(0)?.contiguous()?;
    Ok((base + a.matmul(&b)?.affine(delta.scale, 0.0)?)?)
}

/// Materializes the merged weights of every targeted layer for one image,
/// pairing `AdapterBundle` entries with named base weights.
pub fn merge_adapters(
    bundle: &AdapterBundle,
    named_base: &[(String, &Tensor)],
    image: usize,
) -> Result<Vec<(String, Tensor)>> {
    let mut out = Vec::new();
    for (i, blk) in bundle.blocks.iter().enumerate() {
        let sites: [(&str, &LowRankDelta); 6] = [
            ("attn.q", &blk.q),
            ("attn.k", &blk.k),
            ("attn.v", &blk.v),
            ("attn.o", &blk.o),
            ("mlp.fc1", &blk.fc1),
            ("mlp.fc2", &blk.fc2),
        ];
        for (site, delta) in sites {
            let name = format!("blocks.{i}.{site}");
            let base = named_base
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::AdapterShape {
                    layer: name.clone(),
                    reason: "no base weight with this name".into(),
                })?;
            let (bo, bi) = base.1.dims2()?;
            let (_, ao, _) = delta.a.dims3()?;
            let (_, _, dbi) = delta.b.dims3()?;
            if ao != bo || dbi != bi {
                return Err(Error::AdapterShape {
                    layer: name,
                    reason: format!("base [{bo}, {bi}] vs delta out {ao}, in {dbi}"),
                });
            }
            out.push((name, merge_effective_weight(base.1, delta, image)?));
        }
    }
    Ok(out)
}
