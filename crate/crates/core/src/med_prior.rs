//! Prior transfer from frozen teacher encoders: modality-conditioned query
//! tokens, attentive key-feature selection, inter-image difference features
//! and the contrastive alignment loss.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{linear, Linear, Module, VarBuilder, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::init::init_params;
use crate::tensor_ops::{bilinear_resize, l2_normalize_guarded};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MedAlignMode {
    Off,
    /// align per-image global pooled features
    Global,
    /// align every spatial position's feature
    Local,
    /// align query-selected key features, single image
    Selected,
    /// inter-image relation via a 3-layer MLP on concatenated pair features
    SelectedMlpRelation,
    /// inter-image relation via subtraction (full design)
    #[default]
    SelectedSubtraction,
}

impl MedAlignMode {
    pub fn uses_pairs(&self) -> bool {
        matches!(self, MedAlignMode::SelectedMlpRelation | MedAlignMode::SelectedSubtraction)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct MedPriorConfig {
    /// number of query tokens N
    pub n_query_tokens: usize,
    pub temperature: f64,
    pub mode: MedAlignMode,
}

impl Default for MedPriorConfig {
    fn default() -> Self {
        Self {
            n_query_tokens: 8,
            temperature: 0.07,
            mode: MedAlignMode::SelectedSubtraction,
        }
    }
}

/// Zero-difference guard for rowwise normalization.
pub const DIFF_NORM_EPS: f64 = 1e-12;

/// Learnable student-side heads for prior alignment.
#[derive(Debug)]
pub struct MedPriorHeads {
    pub cfg: MedPriorConfig,
    dim: usize,
    q1: Linear,
    q2: Linear,
    q3: Linear,
    key_map: Linear,
    teacher_key_map: Linear,
    relation: Option<(Linear, Linear, Linear)>,
    teacher_relation: Option<(Linear, Linear, Linear)>,
}

impl MedPriorHeads {
    pub fn new(cfg: MedPriorConfig, d_m: usize, dim: usize, vb: VarBuilder) -> Result<Self> {
        if cfg.n_query_tokens == 0 {
            return Err(Error::Config("n_query_tokens must be >= 1".into()));
        }
        let n = cfg.n_query_tokens;
        let relation = if cfg.mode == MedAlignMode::SelectedMlpRelation {
            Some((
                linear(2 * dim, dim, vb.pp("rel1"))?,
                linear(dim, dim, vb.pp("rel2"))?,
                linear(dim, dim, vb.pp("rel3"))?,
            ))
        } else {
            None
        };
        let teacher_relation = if cfg.mode == MedAlignMode::SelectedMlpRelation {
            Some((
                linear(2 * dim, dim, vb.pp("t_rel1"))?,
                linear(dim, dim, vb.pp("t_rel2"))?,
                linear(dim, dim, vb.pp("t_rel3"))?,
            ))
        } else {
            None
        };
        Ok(Self {
            cfg,
            dim,
            q1: linear(d_m, d_m, vb.pp("q1"))?,
            q2: linear(d_m, d_m, vb.pp("q2"))?,
            q3: linear(d_m, n * dim, vb.pp("q3"))?,
            key_map: linear(dim, dim, vb.pp("key_map"))?,
            teacher_key_map: linear(dim, dim, vb.pp("t_key_map"))?,
            relation,
            teacher_relation,
        })
    }

    /// Three-layer MLP from the modality feature to N query tokens
    /// `[B, N, dim]`.
    pub fn make_query_tokens(&self, m: &Tensor) -> Result<Tensor> {
        let b = m.dims2()?.0;
        let x = self.q1.forward(m)?.gelu_erf()?;
        let x = self.q2.forward(&x)?.gelu_erf()?;
        let x = self.q3.forward(&x)?;
        Ok(x.reshape((b, self.cfg.n_query_tokens, self.dim))?)
    }

    fn attention(&self, tokens: &Tensor, fmap_tokens: &Tensor, key_map: &Linear) -> Result<Tensor> {
        let d = self.dim as f64;
        let keys = key_map.forward(fmap_tokens)?; // [B, hw, d]
        let logits = tokens
            .matmul(&keys.transpose(1, 2)?.contiguous()?)?
            .affine(1.0 / d.sqrt(), 0.0)?;
        Ok(candle_nn::ops::softmax(&logits, D::Minus1)?)
    }

    /// Attention maps of the student's query tokens over the feature map:
    /// `tokens [B, N, d]`, `fmap [B, d, h, w]` -> `[B, N, h*w]`.
    pub fn attention_map(&self, tokens: &Tensor, fmap: &Tensor) -> Result<Tensor> {
        self.attention(tokens, &fmap_tokens(fmap)?, &self.key_map)
    }

    /// Teacher-side attention maps with the shared query tokens but the
    /// teacher-specific key map. `t_tokens: [B, h*w, d]`.
    pub fn teacher_attention_map(&self, tokens: &Tensor, t_tokens: &Tensor) -> Result<Tensor> {
        self.attention(tokens, t_tokens, &self.teacher_key_map)
    }

    /// Student key features `P: [B, N, d]`.
    pub fn student_key_features(&self, tokens: &Tensor, fmap: &Tensor) -> Result<Tensor> {
        let ft = fmap_tokens(fmap)?;
        let attn = self.attention(tokens, &ft, &self.key_map)?;
        select_key_features(&attn, &ft)
    }

    /// Teacher key features `Q: [B, N, d]` from projected teacher tokens.
    pub fn teacher_key_features(&self, tokens: &Tensor, t_tokens: &Tensor) -> Result<Tensor> {
        let attn = self.attention(tokens, t_tokens, &self.teacher_key_map)?;
        select_key_features(&attn, t_tokens)
    }

    fn relation_mlp(mlp: &(Linear, Linear, Linear), pair_cat: &Tensor) -> Result<Tensor> {
        let x = mlp.0.forward(pair_cat)?.gelu_erf()?;
        let x = mlp.1.forward(&x)?.gelu_erf()?;
        Ok(mlp.2.forward(&x)?)
    }

    /// Builds the aligned (student, teacher) feature sets for the configured
    /// mode. `fmap`/`t_tokens` as above; `pooled` is the prenorm global
    /// feature `[B, d]`. Returns rowwise-normalized `(u, v)` of shape
    /// `[groups, slots, d]`.
    pub fn alignment_features(
        &self,
        encoding_m: &Tensor,
        fmap: &Tensor,
        pooled: &Tensor,
        t_tokens: &Tensor,
        pairs: &[(usize, usize)],
    ) -> Result<(Tensor, Tensor)> {
        let norm = |t: &Tensor| l2_normalize_guarded(t, DIFF_NORM_EPS);
        match self.cfg.mode {
            MedAlignMode::Off => Err(Error::Config("alignment disabled (mode = off)".into())),
            MedAlignMode::Global => {
                let t_pooled = t_tokens.mean(1)?; // [B, d]
                let u = norm(&pooled.unsqueeze(1)?)?;
                let v = norm(&t_pooled.unsqueeze(1)?)?;
                Ok((u, v))
            }
            MedAlignMode::Local => {
                let u = norm(&fmap_tokens(fmap)?)?;
                let v = norm(t_tokens)?;
                Ok((u, v))
            }
            MedAlignMode::Selected => {
                let tokens = self.make_query_tokens(encoding_m)?;
                let u = norm(&self.student_key_features(&tokens, fmap)?)?;
                let v = norm(&self.teacher_key_features(&tokens, t_tokens)?)?;
                Ok((u, v))
            }
            MedAlignMode::SelectedMlpRelation | MedAlignMode::SelectedSubtraction => {
                let tokens = self.make_query_tokens(encoding_m)?;
                let p = self.student_key_features(&tokens, fmap)?;
                let q = self.teacher_key_features(&tokens, t_tokens)?;
                if self.cfg.mode == MedAlignMode::SelectedSubtraction {
                    let u = difference(&p, pairs)?;
                    let v = difference(&q, pairs)?;
                    Ok((u, v))
                } else {
                    let cat = |f: &Tensor| -> Result<Tensor> {
                        let (i, j) = gather_pairs(f, pairs)?;
                        Ok(Tensor::cat(&[&i, &j], D::Minus1)?)
                    };
                    let rel = self.relation.as_ref().expect("relation heads exist");
                    let t_rel = self.teacher_relation.as_ref().expect("relation heads exist");
                    let u = norm(&Self::relation_mlp(rel, &cat(&p)?)?)?;
                    let v = norm(&Self::relation_mlp(t_rel, &cat(&q)?)?)?;
                    Ok((u, v))
                }
            }
        }
    }
}

/// `[B, d, h, w] -> [B, h*w, d]`
pub fn fmap_tokens(fmap: &Tensor) -> Result<Tensor> {
    let (b, d, h, w) = fmap.dims4()?;
    Ok(fmap.reshape((b, d, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// Attentive pooling: `attn [B, N, h*w]` (rows sum to 1) applied to
/// `tokens [B, h*w, d]` -> `[B, N, d]`.
pub fn select_key_features(attn: &Tensor, tokens: &Tensor) -> Result<Tensor> {
    Ok(attn.matmul(tokens)?)
}

fn gather_pairs(feats: &Tensor, pairs: &[(usize, usize)]) -> Result<(Tensor, Tensor)> {
    if pairs.is_empty() {
        return Err(Error::other("difference: empty pair list"));
    }
    let dev = feats.device();
    let idx_i: Vec<u32> = pairs.iter().map(|&(i, _)| i as u32).collect();
    let idx_j: Vec<u32> = pairs.iter().map(|&(_, j)| j as u32).collect();
    let ti = feats.index_select(&Tensor::from_vec(idx_i, (pairs.len(),), dev)?, 0)?;
    let tj = feats.index_select(&Tensor::from_vec(idx_j, (pairs.len(),), dev)?, 0)?;
    Ok((ti, tj))
}

/// Rowwise pair differences, L2-normalized with a zero guard:
/// `feats [B, N, d]` -> `[pairs, N, d]`.
pub fn difference(feats: &Tensor, pairs: &[(usize, usize)]) -> Result<Tensor> {
    let (ti, tj) = gather_pairs(feats, pairs)?;
    l2_normalize_guarded(&(ti - tj)?, DIFF_NORM_EPS)
}

/// Contrastive alignment: every (group, slot) position's
/// positive is its aligned teacher feature; negatives are all other teacher
/// features in the batch. `u, v: [G, S, d]`, rows pre-normalized.
pub fn med_align_loss(u: &Tensor, v: &Tensor, temperature: f64) -> Result<Tensor> {
    let (g, s, d) = u.dims3()?;
    let (gv, sv, dv) = v.dims3()?;
    if gv == 0 || sv == 0 {
        return Err(Error::other("med_align_loss: empty teacher feature set"));
    }
    if (g, s, d) != (gv, sv, dv) {
        return Err(Error::other(format!(
            "med_align_loss: shape mismatch {:?} vs {:?}",
            u.dims(),
            v.dims()
        )));
    }
    let m = g * s;
    let uf = u.reshape((m, d))?;
    let vf = v.reshape((m, d))?;
    let logits = uf
        .matmul(&vf.transpose(0, 1)?.contiguous()?)?
        .affine(1.0 / temperature, 0.0)?;
    let logp = candle_nn::ops::log_softmax(&logits, D::Minus1)?;
    let idx = Tensor::arange(0u32, m as u32, u.device())?.reshape((m, 1))?;
    let diag = logp.gather(&idx, 1)?;
    Ok(diag.mean_all()?.neg()?)
}

/// Pairing used for inter-image differences: first half of the batch against
/// the second half (mostly cross-patient under P x K sampling).
pub fn make_pairs(batch: usize) -> Vec<(usize, usize)> {
    let half = batch / 2;
    (0..half).map(|i| (i, i + half)).collect()
}

/// A frozen teacher encoder: produces a feature map `[B, d_t, h', w']`.
#[derive(Debug)]
pub enum FrozenEncoder {
    Backbone(Backbone),
    /// precomputed feature maps keyed by record id
    Precomputed(HashMap<String, Tensor>),
}

#[derive(Debug)]
pub struct Teacher {
    encoder: FrozenEncoder,
    /// frozen seeded projection `[d_t, d]`, present when d_t != d
    projection: Option<Tensor>,
    pub dim_t: usize,
}

impl Teacher {
    /// Desk-scale synthetic teacher: a frozen randomly initialized backbone.
    pub fn frozen_synthetic(
        cfg: BackboneConfig,
        student_dim: usize,
        seed: u64,
        dtype: DType,
        dev: &Device,
    ) -> Result<Self> {
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, dtype, dev);
        let backbone = Backbone::new(cfg.clone(), vb)?;
        init_params(&varmap, seed)?;
        let projection = frozen_projection(cfg.dim, student_dim, seed ^ 0x70726f6a, dtype, dev)?;
        Ok(Self {
            encoder: FrozenEncoder::Backbone(backbone),
            projection,
            dim_t: cfg.dim,
        })
    }

    /// Teacher backed by a checkpointed backbone on disk.
    pub fn from_checkpoint(path: &Path, student_dim: usize, dtype: DType, dev: &Device) -> Result<Self> {
        let (cfg, varmap) = crate::checkpoint::load_backbone(path, dtype, dev)?;
        let vb = VarBuilder::from_varmap(&varmap, dtype, dev);
        let backbone = Backbone::new(cfg.clone(), vb)?;
        let projection = frozen_projection(cfg.dim, student_dim, 0x70726f6a, dtype, dev)?;
        Ok(Self {
            encoder: FrozenEncoder::Backbone(backbone),
            projection,
            dim_t: cfg.dim,
        })
    }

    /// Teacher serving precomputed `[d_t, h', w']` maps keyed by record id.
    pub fn precomputed(features: HashMap<String, Tensor>, d_t: usize, student_dim: usize) -> Result<Self> {
        let (dtype, dev) = features
            .values()
            .next()
            .map(|t| (t.dtype(), t.device().clone()))
            .ok_or_else(|| Error::other("precomputed teacher: no features"))?;
        let projection = frozen_projection(d_t, student_dim, 0x70726f6a, dtype, &dev)?;
        Ok(Self {
            encoder: FrozenEncoder::Precomputed(features),
            projection,
            dim_t: d_t,
        })
    }

    /// Detached, projected, grid-matched teacher tokens `[B, h*w, d]`.
    /// `record_ids` is consulted only for precomputed teachers.
    pub fn tokens(
        &self,
        images: &Tensor,
        record_ids: Option<&[String]>,
        target_hw: (usize, usize),
    ) -> Result<Tensor> {
        let fmap = match &self.encoder {
            FrozenEncoder::Backbone(b) => b.extract_features(images, None)?.detach(),
            FrozenEncoder::Precomputed(map) => {
                let ids = record_ids
                    .ok_or_else(|| Error::other("precomputed teacher needs record ids"))?;
                let maps = ids
                    .iter()
                    .map(|id| {
                        map.get(id)
                            .cloned()
                            .ok_or_else(|| Error::other(format!("no precomputed features for `{id}`")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Tensor::stack(&maps, 0)?.detach()
            }
        };
        let resized = bilinear_resize(&fmap, target_hw.0, target_hw.1)?;
        let tokens = fmap_tokens(&resized)?;
        match &self.projection {
            None => Ok(tokens),
            Some(p) => Ok(tokens.broadcast_matmul(p)?),
        }
    }
}

fn frozen_projection(
    d_t: usize,
    d: usize,
    seed: u64,
    dtype: DType,
    dev: &Device,
) -> Result<Option<Tensor>> {
    if d_t == d {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = 1.0 / (d_t as f64).sqrt();
    let vals: Vec<f64> = (0..d_t * d)
        .map(|_| {
            let u1: f64 = rng.random_range(f64::EPSILON..1.0);
            let u2: f64 = rng.random_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std
        })
        .collect();
    Ok(Some(Tensor::from_vec(vals, (d_t, d), dev)?.to_dtype(dtype)?))
}

/// Frozen teachers keyed by the dataset-level modality label.
#[derive(Default)]
pub struct TeacherRegistry {
    teachers: BTreeMap<String, Teacher>,
}

impl TeacherRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, modality_label: impl Into<String>, teacher: Teacher) {
        self.teachers.insert(modality_label.into(), teacher);
    }

    pub fn get(&self, modality_label: &str) -> Result<&Teacher> {
        self.teachers.get(modality_label).ok_or_else(|| Error::TeacherMissing {
            modality: modality_label.to_string(),
            registered: self.teachers.keys().cloned().collect(),
        })
    }

    pub fn labels(&self) -> Vec<String> {
        self.teachers.keys().cloned().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.teachers.is_empty()
    }

    /// One frozen synthetic teacher per label, distinct seeds.
    pub fn synthetic_for_labels(
        labels: &[String],
        cfg: &BackboneConfig,
        student_dim: usize,
        base_seed: u64,
        dtype: DType,
        dev: &Device,
    ) -> Result<Self> {
        let mut reg = Self::new();
        for (i, label) in labels.iter().enumerate() {
            let teacher = Teacher::frozen_synthetic(
                cfg.clone(),
                student_dim,
                base_seed.wrapping_add(1 + i as u64).wrapping_mul(0x9e3779b97f4a7c15),
                dtype,
                dev,
            )?;
            reg.register(label.clone(), teacher);
        }
        Ok(reg)
    }
}
