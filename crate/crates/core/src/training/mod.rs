//! The optimization recipe: loss composition, modality-homogeneous P x K
//! sampling, augmentation, cosine learning-rate schedule and the training
//! loop.

mod augment;
mod optimizer;
mod sampler;

pub use augment::{augment_train, eval_slice_indices, preprocess_eval, resize_short_for_crop, train_slice_indices};
pub use optimizer::{AdamW, AdamWParams};
pub use sampler::{sample_batch, TrainIndex};

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::VarMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_model::{DatasetManifest, ImageRecord, ImageSource, Split};
use crate::error::{Error, Result};
use crate::imaging::PixelImage;
use crate::med_prior::{make_pairs, med_align_loss, TeacherRegistry};
use crate::model::{ModelConfig, ReidModel};
use crate::tensor_ops::softplus;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// balancing weight of the alignment term
    pub lambda: f64,
    /// initial learning rate (1e-5 suits a pretrained backbone;
    /// training from scratch at desk scale needs more)
    pub lr0: f64,
    pub total_steps: usize,
    /// identities per batch
    pub p: usize,
    /// images per identity
    pub k: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// slices sampled per scan
    pub slice_sample: usize,
    /// training crop side (multiple of 16)
    pub crop_size: usize,
    pub seed: u64,
    /// checkpoint every N steps (0 = final only)
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            lr0: 3e-4,
            total_steps: 2000,
            p: 4,
            k: 4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            slice_sample: 8,
            crop_size: 224,
            seed: 0,
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        if self.p < 2 || self.k < 2 {
            return Err(Error::Config("need P >= 2 identities and K >= 2 images".into()));
        }
        if self.crop_size == 0 || self.crop_size % 16 != 0 {
            return Err(Error::Config("crop_size must be a positive multiple of 16".into()));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Mean cross-entropy over the batch for patient-ID classification.
pub fn id_classification_loss(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, c) = logits.dims2()?;
    if labels.len() != b {
        return Err(Error::other("label count != batch size"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::other(format!("label {bad} out of range (C = {c})")));
    }
    let logp = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    let idx: Vec<u32> = labels.iter().map(|&l| l as u32).collect();
    let idx = Tensor::from_vec(idx, (b, 1), logits.device())?;
    Ok(logp.gather(&idx, 1)?.mean_all()?.neg()?)
}

/// Batch-hard triplet loss with soft margin: per anchor, hardest positive
/// and hardest negative Euclidean distances, `mean softplus(d_ap - d_an)`.
///
/// The training loop feeds this the unit-normalized embeddings. Applied to
/// raw pooled features the loss admits a degenerate minimizer — shrinking
/// all features toward a single point drives `d_ap - d_an` to zero from
/// both sides and the optimizer reliably finds it; on the unit sphere that
/// contraction is unavailable and the loss has to separate identities.
pub fn triplet_loss_soft_margin(embeddings: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, _d) = embeddings.dims2()?;
    if labels.len() != b {
        return Err(Error::other("label count != batch size"));
    }
    // each anchor needs a positive and a negative
    for (i, &li) in labels.iter().enumerate() {
        let has_pos = labels.iter().enumerate().any(|(j, &lj)| j != i && lj == li);
        let has_neg = labels.iter().any(|&lj| lj != li);
        if !has_pos || !has_neg {
            return Err(Error::Sampling(format!(
                "anchor {i} (label {li}) lacks a {} in the batch",
                if has_pos { "negative" } else { "positive" }
            )));
        }
    }

    let sq = embeddings.sqr()?.sum_keepdim(D::Minus1)?; // [b,1]
    let dots = embeddings.matmul(&embeddings.t()?.contiguous()?)?;
    let d2 = sq
        .broadcast_add(&sq.t()?)?
        .broadcast_sub(&dots.affine(2.0, 0.0)?)?;
    let eps = Tensor::full(1e-12, (b, b), embeddings.device())?.to_dtype(embeddings.dtype())?;
    let dist = d2.maximum(&eps)?.sqrt()?;

    let mut pos = vec![0f32; b * b];
    let mut neg = vec![0f32; b * b];
    for i in 0..b {
        for j in 0..b {
            if i != j && labels[i] == labels[j] {
                pos[i * b + j] = 1.0;
            }
            if labels[i] != labels[j] {
                neg[i * b + j] = 1.0;
            }
        }
    }
    let dt = embeddings.dtype();
    let dev = embeddings.device();
    let pos = Tensor::from_vec(pos, (b, b), dev)?.to_dtype(dt)?;
    let neg = Tensor::from_vec(neg, (b, b), dev)?.to_dtype(dt)?;

    const BIG: f64 = 1e9;
    let d_ap = dist
        .mul(&pos)?
        .sub(&pos.affine(-BIG, BIG)?)? // -BIG where not positive
        .max(D::Minus1)?;
    let d_an = dist
        .mul(&neg)?
        .add(&neg.affine(-BIG, BIG)?)? // +BIG where not negative
        .min(D::Minus1)?;
    let z = (d_ap - d_an)?;
    Ok(softplus(&z)?.mean_all()?)
}

/// Loss composition: identity terms plus the weighted alignment term.
pub fn total_loss(id_loss: &Tensor, tri_loss: &Tensor, med_loss: Option<&Tensor>, lambda: f64) -> Result<Tensor> {
    let base = (id_loss + tri_loss)?;
    match med_loss {
        Some(m) if lambda != 0.0 => Ok((base + m.affine(lambda, 0.0)?)?),
        _ => Ok(base),
    }
}

/// Cosine annealing to zero. Out-of-range steps clamp with a warning.
pub fn lr_schedule(step: usize, lr0: f64, total_steps: usize) -> f64 {
    let s = if step > total_steps {
        eprintln!("warning: lr_schedule step {step} > total_steps {total_steps}; clamping");
        total_steps
    } else {
        step
    };
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * s as f64 / total_steps as f64).cos())
}

/// In-memory decoded-image cache keyed by record id.
#[derive(Default)]
pub struct ImageCache {
    map: HashMap<String, Arc<Vec<PixelImage>>>,
}

impl ImageCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(&mut self, record: &ImageRecord) -> Result<Arc<Vec<PixelImage>>> {
        if let Some(v) = self.map.get(&record.id) {
            return Ok(v.clone());
        }
        let planes = load_record_planes(record)?;
        let arc = Arc::new(planes);
        self.map.insert(record.id.clone(), arc.clone());
        Ok(arc)
    }
}

pub fn load_record_planes(record: &ImageRecord) -> Result<Vec<PixelImage>> {
    let load = |p: &Path| {
        PixelImage::load_png(p).map_err(|e| Error::ImageUnreadable {
            record_id: record.id.clone(),
            reason: e.to_string(),
        })
    };
    match &record.source {
        ImageSource::Single(p) => Ok(vec![load(p)?]),
        ImageSource::Slices(ps) => ps.iter().map(|p| load(p)).collect(),
    }
}

/// Stacks planes into a `[P, 3, H, W]` tensor.
pub fn planes_to_tensor(planes: &[PixelImage], dtype: DType, dev: &Device) -> Result<Tensor> {
    let (h, w) = (planes[0].h, planes[0].w);
    let mut data = Vec::with_capacity(planes.len() * 3 * h * w);
    for p in planes {
        assert_eq!((p.h, p.w), (h, w), "plane size mismatch in batch");
        data.extend_from_slice(&p.data);
    }
    Ok(Tensor::from_vec(data, (planes.len(), 3, h, w), dev)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_id: f64,
    pub loss_tri: f64,
    pub loss_med: f64,
}

pub struct TrainOutcome {
    pub metrics: Vec<StepMetrics>,
    pub final_checkpoint: PathBuf,
}

/// Sorted train patient ids -> class index.
pub fn identity_labels(manifest: &DatasetManifest) -> BTreeMap<String, usize> {
    let mut pids: Vec<&String> = manifest
        .records
        .iter()
        .filter(|r| r.split == Some(Split::Train))
        .map(|r| &r.patient_id)
        .collect();
    pids.sort();
    pids.dedup();
    pids.into_iter()
        .enumerate()
        .map(|(i, p)| (p.clone(), i))
        .collect()
}

/// Sorted modality labels -> index.
pub fn modality_indices(manifest: &DatasetManifest) -> BTreeMap<String, usize> {
    manifest
        .modality_labels
        .iter()
        .enumerate()
        .map(|(i, m)| (m.clone(), i))
        .collect()
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn save_checkpoint(
    path: &Path,
    varmap: &VarMap,
    opt: Option<&AdamW>,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    step: usize,
) -> Result<()> {
    let data = varmap.data().lock().unwrap();
    let mut names: Vec<&String> = data.keys().collect();
    names.sort();
    let mut tensors: Vec<(String, Tensor)> = names
        .iter()
        .map(|n| ((*n).clone(), data[*n].as_tensor().clone()))
        .collect();
    drop(data);
    if let Some(opt) = opt {
        tensors.extend(opt.state());
    }
    let mut meta = BTreeMap::new();
    meta.insert(
        "model_config".to_string(),
        serde_json::to_string(model_cfg).map_err(|e| Error::Checkpoint(e.to_string()))?,
    );
    meta.insert(
        "backbone_config".to_string(),
        serde_json::to_string(&model_cfg.backbone).map_err(|e| Error::Checkpoint(e.to_string()))?,
    );
    meta.insert(
        "train_config".to_string(),
        serde_json::to_string(train_cfg).map_err(|e| Error::Checkpoint(e.to_string()))?,
    );
    meta.insert("train_step".to_string(), step.to_string());
    crate::checkpoint::save_tensors(path, &tensors, &meta)
}

/// Runs the full training loop, writing `metrics.csv` and checkpoints under
/// `run_dir`. Deterministic given the config seed.
pub fn train_loop(
    model: &ReidModel,
    varmap: &VarMap,
    manifest: &DatasetManifest,
    teachers: Option<&TeacherRegistry>,
    cfg: &TrainConfig,
    run_dir: &Path,
    resume_from: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let labels_map = identity_labels(manifest);
    if model.cfg.n_identities != labels_map.len() {
        return Err(Error::Config(format!(
            "model has {} identity classes but manifest has {} train patients",
            model.cfg.n_identities,
            labels_map.len()
        )));
    }
    if model.med.is_some() && cfg.lambda > 0.0 {
        let teachers = teachers.ok_or_else(|| Error::Config("prior alignment enabled but no teachers".into()))?;
        for m in manifest.modality_labels.iter() {
            teachers.get(m)?;
        }
    }
    let mod_idx = modality_indices(manifest);
    let index = TrainIndex::build(manifest);
    let dtype = model.dtype();
    let dev = model.device().clone();

    std::fs::create_dir_all(run_dir)?;
    let ckpt_dir = run_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;

    let named_vars: Vec<(String, candle_core::Var)> = {
        let data = varmap.data().lock().unwrap();
        let mut names: Vec<&String> = data.keys().collect();
        names.sort();
        names.into_iter().map(|n| (n.clone(), data[n].clone())).collect()
    };
    let mut opt = AdamW::new(
        named_vars,
        AdamWParams {
            lr: cfg.lr0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
        },
    )?;

    let mut start_step = 0usize;
    if let Some(path) = resume_from {
        let meta = crate::checkpoint::load_varmap(path, varmap)?;
        let (tensors, _) = crate::checkpoint::load_tensors(path, &dev)?;
        start_step = meta
            .get("train_step")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Checkpoint("missing train_step metadata".into()))?;
        opt.load_state(&tensors, start_step)?;
    }

    let metrics_path = run_dir.join("metrics.csv");
    let mut metrics_file = if start_step > 0 && metrics_path.exists() {
        std::fs::OpenOptions::new().append(true).open(&metrics_path)?
    } else {
        let mut f = std::fs::File::create(&metrics_path)?;
        writeln!(f, "step,lr,loss_total,loss_id,loss_tri,loss_med")?;
        f
    };

    let mut sampler_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5a5a5a5a));
    let mut augment_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0xa0a0a0a0));
    // replay the consumed stream so a resumed run sees the same data order
    for _ in 0..start_step {
        let _ = sample_batch(&index, cfg.p, cfg.k, &mut sampler_rng)?;
    }

    let mut cache = ImageCache::new();
    let mut metrics = Vec::with_capacity(cfg.total_steps.saturating_sub(start_step));

    for step in start_step..cfg.total_steps {
        let (modality, record_idxs) = sample_batch(&index, cfg.p, cfg.k, &mut sampler_rng)?;

        // assemble planes
        let mut planes = Vec::new();
        let mut ranges = Vec::with_capacity(record_idxs.len());
        let mut batch_labels = Vec::with_capacity(record_idxs.len());
        let mut batch_ids = Vec::with_capacity(record_idxs.len());
        for &ri in &record_idxs {
            let rec = &manifest.records[ri];
            let source = cache.load(rec)?;
            let mut step_rng = ChaCha8Rng::seed_from_u64(
                cfg.seed ^ (step as u64).wrapping_mul(0x9e3779b97f4a7c15) ^ (ri as u64) << 1,
            );
            // independent per-record stream keeps augmentation order-stable
            let aug = augment_train(&source, cfg.crop_size, cfg.slice_sample, &mut step_rng);
            let _ = &mut augment_rng;
            let start = planes.len();
            planes.extend(aug);
            ranges.push(start..planes.len());
            batch_labels.push(labels_map[&rec.patient_id]);
            batch_ids.push(rec.id.clone());
        }
        let planes_t = planes_to_tensor(&planes, dtype, &dev)?;
        let plane_mods: Vec<usize> = ranges
            .iter()
            .flat_map(|r| std::iter::repeat(mod_idx[&modality]).take(r.end - r.start))
            .collect();

        let fwd = model.forward_planes(&planes_t, &ranges, Some(&plane_mods))?;

        let logits = fwd
            .logits
            .as_ref()
            .ok_or_else(|| Error::Config("training requires an identity head".into()))?;
        let id_loss = id_classification_loss(logits, &batch_labels)?;
        let tri_loss = triplet_loss_soft_margin(&fwd.embeddings, &batch_labels)?;

        let med_loss = match (&model.med, teachers) {
            (Some(heads), Some(regs)) => {
                let teacher = regs.get(&modality)?;
                let rep_idx: Vec<u32> = fwd.rep_planes.iter().map(|&p| p as u32).collect();
                let rep_idx_t = Tensor::from_vec(rep_idx, (fwd.rep_planes.len(),), &dev)?;
                let rep_images = planes_t.index_select(&rep_idx_t, 0)?;
                let fmap_rep = fwd.fmap.index_select(&rep_idx_t, 0)?;
                let (_, _, h, w) = fmap_rep.dims4()?;
                let pooled_rep = crate::backbone::pool_global_prenorm(&fmap_rep)?;
                let t_tokens = teacher.tokens(&rep_images, Some(&batch_ids), (h, w))?;
                let m = fwd
                    .encoding_m
                    .clone()
                    .ok_or_else(|| Error::Config("missing modality feature for prior heads".into()))?;
                let pairs = make_pairs(ranges.len());
                let (u, v) = heads.alignment_features(&m, &fmap_rep, &pooled_rep, &t_tokens, &pairs)?;
                Some(med_align_loss(&u, &v, heads.cfg.temperature)?)
            }
            _ => None,
        };

        let total = total_loss(&id_loss, &tri_loss, med_loss.as_ref(), cfg.lambda)?;

        let m = StepMetrics {
            step,
            lr: lr_schedule(step, cfg.lr0, cfg.total_steps),
            loss_total: scalar(&total)?,
            loss_id: scalar(&id_loss)?,
            loss_tri: scalar(&tri_loss)?,
            loss_med: med_loss.as_ref().map(scalar).transpose()?.unwrap_or(0.0),
        };
        if !m.loss_total.is_finite() {
            let diag = serde_json::json!({
                "step": step,
                "batch_record_ids": batch_ids,
                "loss_id": m.loss_id,
                "loss_tri": m.loss_tri,
                "loss_med": m.loss_med,
            });
            std::fs::write(run_dir.join("diagnostic.json"), diag.to_string())?;
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("id {} tri {} med {}", m.loss_id, m.loss_tri, m.loss_med),
            });
        }

        opt.set_learning_rate(m.lr);
        let grads = total.backward()?;
        opt.step(&grads)?;

        writeln!(
            metrics_file,
            "{},{},{},{},{},{}",
            m.step, m.lr, m.loss_total, m.loss_id, m.loss_tri, m.loss_med
        )?;
        metrics.push(m);

        if cfg.checkpoint_interval > 0 && (step + 1) % cfg.checkpoint_interval == 0 && step + 1 < cfg.total_steps {
            let path = ckpt_dir.join(format!("step_{:06}.ckpt", step + 1));
            save_checkpoint(&path, varmap, Some(&opt), &model.cfg, cfg, step + 1)?;
        }
    }
    metrics_file.flush()?;

    let final_path = ckpt_dir.join("final.ckpt");
    save_checkpoint(&final_path, varmap, Some(&opt), &model.cfg, cfg, cfg.total_steps)?;
    Ok(TrainOutcome {
        metrics,
        final_checkpoint: final_path,
    })
}
