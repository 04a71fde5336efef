//! Scripted variant runs: each variant trains under one flag configuration
//! and reports CMC on the held-out query/gallery split. Seed discipline:
//! variants sharing a seed share data order and, where flags permit,
//! initial weights, so report deltas are attributable to the flag under
//! test.

use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::compa::{CompaConfig, ModalityMode};
use crate::data_model::DatasetManifest;
use crate::error::{Error, Result};
use crate::med_prior::{MedAlignMode, MedPriorConfig, TeacherRegistry};
use crate::model::{ModelConfig, ReidModel};
use crate::retrieval::{evaluate, EvalReport};
use crate::training::{identity_labels, train_loop, TrainConfig};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct VariantSpec {
    pub name: String,
    pub modality_mode: ModalityMode,
    pub med_align: MedAlignMode,
    /// modality codebook size
    pub codebook_size: usize,
    /// low-rank adapter rank
    pub rank: usize,
    /// grouped generator output groups
    pub groups: usize,
    /// alignment loss weight
    pub lambda: f64,
    /// prior-head query tokens
    pub n_query_tokens: usize,
}

impl Default for VariantSpec {
    fn default() -> Self {
        let compa = CompaConfig::default();
        let med = MedPriorConfig::default();
        Self {
            name: "full".into(),
            modality_mode: ModalityMode::ContinuousCodebook,
            med_align: med.mode,
            codebook_size: compa.codebook_size,
            rank: compa.rank,
            groups: compa.groups,
            lambda: 0.01,
            n_query_tokens: med.n_query_tokens,
        }
    }
}

impl VariantSpec {
    pub fn named(name: &str, modality_mode: ModalityMode, med_align: MedAlignMode) -> Self {
        Self {
            name: name.into(),
            modality_mode,
            med_align,
            ..Self::default()
        }
    }

    /// Resolves the variant into a model configuration.
    pub fn model_config(
        &self,
        backbone: &BackboneConfig,
        n_identities: usize,
        n_dataset_modalities: usize,
    ) -> Result<ModelConfig> {
        if self.med_align != MedAlignMode::Off && self.lambda == 0.0 {
            return Err(Error::Config(format!(
                "variant `{}`: alignment mode set but lambda = 0",
                self.name
            )));
        }
        let cfg = ModelConfig {
            backbone: backbone.clone(),
            compa: CompaConfig {
                codebook_size: self.codebook_size,
                d_m: backbone.dim,
                rank: self.rank,
                groups: self.groups,
                mode: self.modality_mode,
                n_dataset_modalities,
            },
            med: MedPriorConfig {
                n_query_tokens: self.n_query_tokens,
                mode: self.med_align,
                ..MedPriorConfig::default()
            },
            n_identities,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VariantReport {
    pub variant: String,
    pub seed: u64,
    pub report: EvalReport,
    pub steps: usize,
    pub wall_seconds: f64,
}

/// Trains one variant on the manifest's train split and evaluates on
/// query/gallery. Synthetic frozen teachers are derived from `teacher_seed`
/// (shared across variants).
#[allow(clippy::too_many_arguments)]
pub fn run_variant(
    spec: &VariantSpec,
    manifest: &DatasetManifest,
    backbone: &BackboneConfig,
    base_train: &TrainConfig,
    seed: u64,
    teacher_seed: u64,
    run_dir: &Path,
    dev: &Device,
) -> Result<VariantReport> {
    let start = Instant::now();
    let n_identities = identity_labels(manifest).len();
    let labels: Vec<String> = manifest.modality_labels.iter().cloned().collect();
    let cfg = spec.model_config(backbone, n_identities, labels.len())?;

    let mut train = base_train.clone();
    train.lambda = if spec.med_align == MedAlignMode::Off { 0.0 } else { spec.lambda };
    train.seed = seed;

    let (model, varmap) = ReidModel::init(cfg, seed, DType::F32, dev)?;
    let teachers = if spec.med_align != MedAlignMode::Off {
        Some(TeacherRegistry::synthetic_for_labels(
            &labels,
            backbone,
            backbone.dim,
            teacher_seed,
            DType::F32,
            dev,
        )?)
    } else {
        None
    };

    let outcome = train_loop(
        &model,
        &varmap,
        manifest,
        teachers.as_ref(),
        &train,
        run_dir,
        None,
    )?;
    let report = evaluate(
        &model,
        manifest,
        train.crop_size,
        train.slice_sample,
        "synthetic",
        seed,
    )?;
    let vr = VariantReport {
        variant: spec.name.clone(),
        seed,
        report,
        steps: train.total_steps,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    let _ = outcome;
    Ok(vr)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    /// codebook size
    L,
    /// adapter rank
    R,
    /// generator groups
    G,
    /// alignment weight
    Lambda,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "L" | "l" | "codebook" => Ok(Self::L),
            "r" | "R" | "rank" => Ok(Self::R),
            "G" | "g" | "groups" => Ok(Self::G),
            "lambda" => Ok(Self::Lambda),
            other => Err(Error::Config(format!("unknown sweep parameter `{other}`"))),
        }
    }
}

pub fn apply_sweep_value(base: &VariantSpec, param: SweepParam, value: f64) -> Result<VariantSpec> {
    let mut spec = base.clone();
    let as_usize = |v: f64| -> Result<usize> {
        if v.fract() != 0.0 || v < 1.0 {
            return Err(Error::Config(format!("value {v} is not a positive integer")));
        }
        Ok(v as usize)
    };
    match param {
        SweepParam::L => spec.codebook_size = as_usize(value)?,
        SweepParam::R => spec.rank = as_usize(value)?,
        SweepParam::G => spec.groups = as_usize(value)?,
        SweepParam::Lambda => spec.lambda = value,
    }
    spec.name = format!("{}_{:?}_{}", base.name, param, value);
    Ok(spec)
}

/// One run per value, identical seed across runs.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    param: SweepParam,
    values: &[f64],
    base: &VariantSpec,
    manifest: &DatasetManifest,
    backbone: &BackboneConfig,
    base_train: &TrainConfig,
    seed: u64,
    teacher_seed: u64,
    out_root: &Path,
    dev: &Device,
) -> Result<Vec<VariantReport>> {
    if values.is_empty() {
        return Err(Error::Config("sweep values must be nonempty".into()));
    }
    let mut reports = Vec::with_capacity(values.len());
    for v in values {
        let spec = apply_sweep_value(base, param, *v)?;
        let run_dir = out_root.join(&spec.name);
        reports.push(run_variant(
            &spec, manifest, backbone, base_train, seed, teacher_seed, &run_dir, dev,
        )?);
    }
    Ok(reports)
}

/// `variant,R1,R5,steps,wall_seconds` rows.
pub fn reports_csv(reports: &[VariantReport]) -> String {
    let mut s = String::from("variant,R1,R5,steps,wall_seconds\n");
    for r in reports {
        s.push_str(&format!(
            "{},{},{},{},{:.3}\n",
            r.variant, r.report.r1, r.report.r5, r.steps, r.wall_seconds
        ));
    }
    s
}
