//! The composite student model: backbone + runtime parameter adapter +
//! prior-alignment heads + identity classifier.

use candle_core::{DType, Device, Tensor};
use candle_nn::{linear, Linear, Module, VarBuilder, VarMap};
use serde::{Deserialize, Serialize};

use crate::backbone::{pool_global_prenorm, AdapterBundle, Backbone, BackboneConfig, PATCH_SIZE};
use crate::compa::{AdapterGenerator, CompaConfig, ModalityEncoder, ModalityEncoding, ModalityMode};
use crate::error::{Error, Result};
use crate::init::init_params;
use crate::med_prior::{MedAlignMode, MedPriorConfig, MedPriorHeads};
use crate::tensor_ops::l2_normalize;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub compa: CompaConfig,
    pub med: MedPriorConfig,
    /// identity classifier size; 0 disables the head (inference-only)
    pub n_identities: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.compa.mode != ModalityMode::None {
            self.compa.validate()?;
            if self.compa.d_m != self.backbone.dim {
                // desk-scale convention: d_m tracks the backbone dim
                return Err(Error::Config(format!(
                    "compa.d_m {} must equal backbone.dim {}",
                    self.compa.d_m, self.backbone.dim
                )));
            }
        }
        Ok(())
    }
}

pub struct ReidModel {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub encoder: Option<ModalityEncoder>,
    pub generator: Option<AdapterGenerator>,
    pub med: Option<MedPriorHeads>,
    /// stand-in modality feature when ComPA is disabled but prior heads on
    med_m0: Option<Tensor>,
    id_head: Option<Linear>,
}

pub struct TrainForward {
    /// per-plane feature maps `[P, d, h, w]`
    pub fmap: Tensor,
    /// per-record prenorm pooled features `[B, d]`
    pub features: Tensor,
    /// per-record unit-norm embeddings `[B, d]`
    pub embeddings: Tensor,
    /// classifier logits `[B, C]`
    pub logits: Option<Tensor>,
    /// modality encoding of the representative plane per record
    pub encoding_m: Option<Tensor>,
    /// representative plane index per record
    pub rep_planes: Vec<usize>,
}

impl ReidModel {
    pub fn new(cfg: ModelConfig, vb: VarBuilder) -> Result<Self> {
        cfg.validate()?;
        let backbone = Backbone::new(cfg.backbone.clone(), vb.pp("backbone"))?;
        let (encoder, generator) = if cfg.compa.mode == ModalityMode::None {
            (None, None)
        } else {
            (
                Some(ModalityEncoder::new(cfg.compa.clone(), vb.pp("modality"))?),
                Some(AdapterGenerator::new(
                    cfg.compa.clone(),
                    cfg.backbone.clone(),
                    vb.pp("compa"),
                )?),
            )
        };
        let d_m = cfg.compa.d_m.max(1);
        let (med, med_m0) = if cfg.med.mode == MedAlignMode::Off {
            (None, None)
        } else {
            let heads = MedPriorHeads::new(cfg.med.clone(), d_m, cfg.backbone.dim, vb.pp("med"))?;
            let m0 = if encoder.is_none() {
                Some(vb.get_with_hints(
                    (1, d_m),
                    "med_m0",
                    candle_nn::init::Init::Randn { mean: 0.0, stdev: 0.02 },
                )?)
            } else {
                None
            };
            (Some(heads), m0)
        };
        let id_head = if cfg.n_identities > 0 {
            Some(linear(cfg.backbone.dim, cfg.n_identities, vb.pp("id_head"))?)
        } else {
            None
        };
        Ok(Self { cfg, backbone, encoder, generator, med, med_m0, id_head })
    }

    /// Fresh model with deterministically initialized parameters.
    pub fn init(cfg: ModelConfig, seed: u64, dtype: DType, dev: &Device) -> Result<(Self, VarMap)> {
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, dtype, dev);
        let model = Self::new(cfg, vb)?;
        init_params(&varmap, seed)?;
        Ok((model, varmap))
    }

    pub fn device(&self) -> &Device {
        self.backbone.device()
    }

    pub fn dtype(&self) -> DType {
        self.backbone.dtype()
    }

    /// Per-image modality encoding and generated adapters; `None` when ComPA
    /// is disabled.
    pub fn adapters_for(
        &self,
        images: &Tensor,
        dataset_modalities: Option<&[usize]>,
    ) -> Result<Option<(ModalityEncoding, AdapterBundle)>> {
        match (&self.encoder, &self.generator) {
            (Some(enc), Some(gen)) => {
                let encoding = enc.encode(images, dataset_modalities)?;
                let bundle = gen.generate(&encoding.m)?;
                Ok(Some((encoding, bundle)))
            }
            _ => Ok(None),
        }
    }

    /// Modality feature used by the prior heads: the ComPA encoding when
    /// available, otherwise a learnable constant broadcast over the batch.
    pub fn med_modality_feature(&self, encoding: Option<&ModalityEncoding>, batch: usize) -> Result<Tensor> {
        match encoding {
            Some(e) => Ok(e.m.clone()),
            None => {
                let m0 = self
                    .med_m0
                    .as_ref()
                    .ok_or_else(|| Error::Config("no modality feature source for prior heads".into()))?;
                Ok(m0.broadcast_as((batch, m0.dims()[1]))?.contiguous()?)
            }
        }
    }

    /// Training forward over a flattened plane batch. `plane_ranges[i]` is
    /// the half-open range of rows in `planes` belonging to record `i`
    /// (single images: length 1; scans: the sampled slices).
    pub fn forward_planes(
        &self,
        planes: &Tensor,
        plane_ranges: &[std::ops::Range<usize>],
        dataset_modalities: Option<&[usize]>,
    ) -> Result<TrainForward> {
        let generated = self.adapters_for(planes, dataset_modalities)?;
        let (encoding, bundle) = match generated {
            Some((e, b)) => (Some(e), Some(b)),
            None => (None, None),
        };
        let fmap = self.backbone.extract_features(planes, bundle.as_ref())?;
        let pooled = pool_global_prenorm(&fmap)?; // [P, d]

        // per-record mean over slice planes
        let mut feats = Vec::with_capacity(plane_ranges.len());
        let mut rep_planes = Vec::with_capacity(plane_ranges.len());
        for r in plane_ranges {
            let len = r.end - r.start;
            let chunk = pooled.narrow(0, r.start, len)?;
            feats.push(if len == 1 { chunk.squeeze(0)? } else { chunk.mean(0)? });
            rep_planes.push(r.start);
        }
        let features = Tensor::stack(&feats, 0)?;
        let embeddings = l2_normalize(&features)?;
        let logits = match &self.id_head {
            Some(head) => Some(head.forward(&features)?),
            None => None,
        };

        let encoding_m = match (&self.med, &encoding) {
            (None, _) => None,
            (Some(_), enc) => {
                let idx: Vec<u32> = rep_planes.iter().map(|&p| p as u32).collect();
                let idx_t = Tensor::from_vec(idx, (rep_planes.len(),), planes.device())?;
                match enc {
                    Some(e) => Some(e.m.index_select(&idx_t, 0)?),
                    None => Some(self.med_modality_feature(None, rep_planes.len())?),
                }
            }
        };

        Ok(TrainForward {
            fmap,
            features,
            embeddings,
            logits,
            encoding_m,
            rep_planes,
        })
    }

    /// Unit-norm embeddings for a batch of single images (eval path).
    pub fn embed_images(&self, images: &Tensor, dataset_modalities: Option<&[usize]>) -> Result<Tensor> {
        let ranges: Vec<_> = (0..images.dims4()?.0).map(|i| i..i + 1).collect();
        Ok(self.forward_planes(images, &ranges, dataset_modalities)?.embeddings)
    }

    /// Scan embedding: slices of one record stacked as `[S, 3, H, W]`.
    pub fn embed_scan(&self, slices: &Tensor, dataset_modality: Option<usize>) -> Result<Tensor> {
        let s = slices.dims4()?.0;
        if s == 0 {
            return Err(Error::other("embed_scan: empty slice list"));
        }
        let mods: Option<Vec<usize>> = dataset_modality.map(|m| vec![m; s]);
        let fwd = self.forward_planes(slices, &[0..s], mods.as_deref())?;
        Ok(fwd.embeddings.squeeze(0)?)
    }

    pub fn image_size_check(&self, h: usize, w: usize) -> Result<()> {
        if h % PATCH_SIZE != 0 || w % PATCH_SIZE != 0 {
            return Err(Error::Config(format!(
                "input {h}x{w} not a multiple of {PATCH_SIZE}"
            )));
        }
        Ok(())
    }
}
