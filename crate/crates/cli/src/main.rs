//! Operator entry points. Exit codes: 0 success, 1 usage error, 2 runtime
//! failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use candle_core::{DType, Device};
use clap::{Args, Parser, Subcommand};

use medreid_core::ablation::{run_variant, sweep, SweepParam, VariantSpec};
use medreid_core::checkpoint;
use medreid_core::compa::ModalityMode;
use medreid_core::config::{run_root, RunConfig};
use medreid_core::data_model::{
    assign_eval_patients, generate_synthetic, load_manifest, split_query_gallery, write_manifest,
    Split, SynthConfig,
};
use medreid_core::med_prior::{MedAlignMode, Teacher, TeacherRegistry};
use medreid_core::model::ReidModel;
use medreid_core::retrieval::{
    embed_manifest, evaluate, rank, save_embeddings, EmbeddingRecord,
};
use medreid_core::training::{
    identity_labels, planes_to_tensor, preprocess_eval, train_loop,
    TrainConfig,
};
use medreid_core::{Error, Result};

#[derive(Parser)]
#[command(name = "medreid", version, about = "Modality-adaptive identity retrieval toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-modality dataset with a manifest
    Synth(SynthArgs),
    /// Train a model from a TOML run config
    Train(TrainArgs),
    /// Extract embeddings for one manifest split
    Embed(EmbedArgs),
    /// CMC evaluation of a checkpoint on a query/gallery manifest
    Evaluate(EvaluateArgs),
    /// Rank a gallery directory against one query image
    Retrieve(RetrieveArgs),
    /// Scripted variant runs and hyper-parameter sweeps
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// number of patients
    #[arg(long, default_value_t = 10)]
    patients: usize,
    /// images per patient
    #[arg(long = "per-patient", default_value_t = 4)]
    per_patient: usize,
    /// number of modality styles
    #[arg(long, default_value_t = 2)]
    modalities: usize,
    /// square image side in pixels
    #[arg(long = "image-size", default_value_t = 64)]
    image_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// patients whose records are multi-slice scans
    #[arg(long = "scan-patients", default_value_t = 0)]
    scan_patients: usize,
    /// slices per scan record
    #[arg(long, default_value_t = 17)]
    slices: usize,
    /// patients held out for query/gallery evaluation
    #[arg(long = "eval-patients", default_value_t = 0)]
    eval_patients: usize,
    /// seed for the query/gallery split
    #[arg(long = "split-seed", default_value_t = 0)]
    split_seed: u64,
    /// output directory
    #[arg(long)]
    out: PathBuf,
    /// overwrite an existing output directory
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run config
    #[arg(long)]
    config: PathBuf,
    /// checkpoint to resume from
    #[arg(long)]
    resume: Option<PathBuf>,
    /// override the alignment loss weight
    #[arg(long)]
    lambda: Option<f64>,
    /// override the step count
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// train | query | gallery
    #[arg(long)]
    split: String,
    /// output archive path (.st; a .json sidecar is written next to it)
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 224)]
    crop: usize,
    #[arg(long = "slice-sample", default_value_t = 8)]
    slice_sample: usize,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 224)]
    crop: usize,
    #[arg(long = "slice-sample", default_value_t = 8)]
    slice_sample: usize,
    /// dataset name recorded in the report
    #[arg(long, default_value = "synthetic")]
    dataset: String,
    /// split seed recorded in the report
    #[arg(long = "split-seed", default_value_t = 0)]
    split_seed: u64,
    /// report path (default: report.json next to the checkpoint)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// query image (png)
    #[arg(long)]
    query: PathBuf,
    /// directory of gallery png images
    #[arg(long = "gallery-dir")]
    gallery_dir: PathBuf,
    #[arg(short, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 224)]
    crop: usize,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// output root; one run directory per variant
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    /// comma-separated seeds; each variant runs once per seed
    #[arg(long, default_value = "0")]
    seeds: String,
    /// sweep one parameter (L | r | G | lambda) instead of the variant set
    #[arg(long)]
    sweep: Option<String>,
    /// comma-separated sweep values
    #[arg(long)]
    values: Option<String>,
    #[arg(long = "crop-size", default_value_t = 224)]
    crop_size: usize,
    #[arg(long, default_value_t = 3e-4)]
    lr0: f64,
    /// identities per batch
    #[arg(long, default_value_t = 4)]
    p: usize,
    /// images per identity
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long = "slice-sample", default_value_t = 8)]
    slice_sample: usize,
    /// backbone depth
    #[arg(long, default_value_t = 4)]
    depth: usize,
    /// backbone width
    #[arg(long, default_value_t = 128)]
    dim: usize,
    #[arg(long = "teacher-seed", default_value_t = 7000)]
    teacher_seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // help/version requests are not errors
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let res = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Embed(a) => cmd_embed(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Retrieve(a) => cmd_retrieve(a),
        Command::Ablate(a) => cmd_ablate(a),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn usage(msg: impl Into<String>) -> Result<ExitCode> {
    eprintln!("error: {}", msg.into());
    Ok(ExitCode::from(1))
}

fn cmd_synth(a: SynthArgs) -> Result<ExitCode> {
    if a.per_patient < 2 {
        return usage("--per-patient must be >= 2 (each patient needs at least two images)");
    }
    let out = if a.out.is_absolute() { a.out.clone() } else { run_root().join(&a.out) };
    if out.exists() {
        if !a.force {
            return usage(format!(
                "output directory {} exists; pass --force to overwrite",
                out.display()
            ));
        }
        std::fs::remove_dir_all(&out)?;
    }
    let cfg = SynthConfig {
        n_patients: a.patients,
        images_per_patient: a.per_patient,
        n_modalities: a.modalities,
        image_size: a.image_size,
        seed: a.seed,
        scan_patients: a.scan_patients,
        slices_per_scan: a.slices,
    };
    let output = generate_synthetic(&cfg, &out)?;
    let mut manifest = output.manifest;
    assign_eval_patients(&mut manifest, a.eval_patients, a.split_seed)?;
    if a.eval_patients > 0 {
        split_query_gallery(&mut manifest, a.split_seed);
    }
    let manifest_path = out.join("manifest.jsonl");
    write_manifest(&manifest, &manifest_path)?;
    println!(
        "wrote {} records ({} patients, {} modalities) to {}",
        manifest.records.len(),
        manifest.patients.len(),
        manifest.modality_labels.len(),
        manifest_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn build_teachers(cfg: &RunConfig, labels: &[String], dev: &Device) -> Result<TeacherRegistry> {
    let mut reg = TeacherRegistry::synthetic_for_labels(
        labels,
        &cfg.backbone,
        cfg.backbone.dim,
        cfg.teacher_seed,
        DType::F32,
        dev,
    )?;
    for (label, path) in &cfg.teacher_checkpoints {
        reg.register(
            label.clone(),
            Teacher::from_checkpoint(path, cfg.backbone.dim, DType::F32, dev)?,
        );
    }
    Ok(reg)
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let mut cfg = RunConfig::load_toml(&a.config)?;
    if let Some(l) = a.lambda {
        cfg.train.lambda = l;
    }
    if let Some(s) = a.steps {
        cfg.train.total_steps = s;
    }
    let run_dir = cfg.resolved_run_dir();
    cfg.echo(&run_dir)?;

    let manifest_path = if cfg.manifest.is_absolute() {
        cfg.manifest.clone()
    } else {
        a.config
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&cfg.manifest)
    };
    let outcome = load_manifest(&manifest_path)?;
    let manifest = outcome.manifest;
    if outcome.dropped_patients > 0 {
        eprintln!(
            "warning: dropped {} patient(s) with fewer than two images",
            outcome.dropped_patients
        );
    }

    let n_identities = identity_labels(&manifest).len();
    let model_cfg = cfg.model_config(n_identities)?;
    let dev = Device::Cpu;
    let (model, varmap) = ReidModel::init(model_cfg, cfg.train.seed, DType::F32, &dev)?;

    let teachers = if cfg.med.mode != MedAlignMode::Off {
        let labels: Vec<String> = manifest.modality_labels.iter().cloned().collect();
        Some(build_teachers(&cfg, &labels, &dev)?)
    } else {
        None
    };

    let out = train_loop(
        &model,
        &varmap,
        &manifest,
        teachers.as_ref(),
        &cfg.train,
        &run_dir,
        a.resume.as_deref(),
    )?;
    println!(
        "trained {} steps; final checkpoint {}",
        cfg.train.total_steps,
        out.final_checkpoint.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "query" => Ok(Split::Query),
        "gallery" => Ok(Split::Gallery),
        other => Err(Error::Config(format!(
            "unknown split `{other}` (expected train | query | gallery)"
        ))),
    }
}

fn load_model_f32(path: &Path) -> Result<ReidModel> {
    let (model, _varmap, _meta) = checkpoint::load_model(path, DType::F32, &Device::Cpu)?;
    Ok(model)
}

fn cmd_embed(a: EmbedArgs) -> Result<ExitCode> {
    let split = parse_split(&a.split)?;
    let model = load_model_f32(&a.checkpoint)?;
    let manifest = load_manifest(&a.manifest)?.manifest;
    let (records, skipped) = embed_manifest(&model, &manifest, split, a.crop, a.slice_sample)?;
    save_embeddings(&a.out, &records)?;
    println!(
        "embedded {} records ({} skipped) to {}",
        records.len(),
        skipped,
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<ExitCode> {
    let model = load_model_f32(&a.checkpoint)?;
    let manifest = load_manifest(&a.manifest)?.manifest;
    let report = evaluate(
        &model,
        &manifest,
        a.crop,
        a.slice_sample,
        &a.dataset,
        a.split_seed,
    )?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::other(e.to_string()))?;
    let out = a.out.unwrap_or_else(|| {
        a.checkpoint
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("report.json")
    });
    std::fs::write(&out, &json)?;
    println!("{json}");
    Ok(ExitCode::SUCCESS)
}

fn embed_single(model: &ReidModel, path: &Path, crop: usize, id: &str) -> Result<EmbeddingRecord> {
    let img = medreid_core::imaging::PixelImage::load_png(path).map_err(|e| Error::ImageUnreadable {
        record_id: id.to_string(),
        reason: e.to_string(),
    })?;
    let prepped = preprocess_eval(&[img], crop, 1);
    let t = planes_to_tensor(&prepped, model.dtype(), model.device())?;
    let emb = model.embed_scan(&t, None)?;
    Ok(EmbeddingRecord {
        record_id: id.to_string(),
        patient_id: String::new(),
        modality_label: String::new(),
        embedding: emb.to_dtype(DType::F32)?.to_vec1::<f32>()?,
    })
}

fn cmd_retrieve(a: RetrieveArgs) -> Result<ExitCode> {
    let model = load_model_f32(&a.checkpoint)?;
    let query = embed_single(&model, &a.query, a.crop, "query")?;
    let mut gallery = Vec::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&a.gallery_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(Error::Eval(format!(
            "no png images in {}",
            a.gallery_dir.display()
        )));
    }
    for p in &entries {
        let id = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        gallery.push(embed_single(&model, p, a.crop, &id)?);
    }
    let k = if a.k > gallery.len() {
        eprintln!(
            "warning: k = {} exceeds gallery size {}; returning the full gallery",
            a.k,
            gallery.len()
        );
        gallery.len()
    } else {
        a.k
    };
    let result = rank(&query, &gallery);
    for (i, (id, score)) in result.ranked.iter().take(k).enumerate() {
        println!(
            "{}",
            serde_json::json!({"rank": i + 1, "id": id, "score": score})
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_csv<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<T>()
                .map_err(|_| Error::Config(format!("bad {what} value `{x}`")))
        })
        .collect()
}

fn cmd_ablate(a: AblateArgs) -> Result<ExitCode> {
    let manifest = load_manifest(&a.manifest)?.manifest;
    let dev = Device::Cpu;
    let backbone = medreid_core::backbone::BackboneConfig {
        depth: a.depth,
        dim: a.dim,
        ..Default::default()
    };
    let train = TrainConfig {
        total_steps: a.steps,
        crop_size: a.crop_size,
        lr0: a.lr0,
        p: a.p,
        k: a.k,
        slice_sample: a.slice_sample,
        ..Default::default()
    };
    let seeds: Vec<u64> = parse_csv(&a.seeds, "seed")?;
    let out = if a.out.is_absolute() { a.out.clone() } else { run_root().join(&a.out) };
    std::fs::create_dir_all(&out)?;

    let mut reports = Vec::new();
    match (&a.sweep, &a.values) {
        (Some(param), Some(values)) => {
            let param: SweepParam = param.parse()?;
            let values: Vec<f64> = parse_csv(values, "sweep")?;
            for &seed in &seeds {
                let base = VariantSpec {
                    name: format!("full_s{seed}"),
                    ..VariantSpec::default()
                };
                reports.extend(sweep(
                    param,
                    &values,
                    &base,
                    &manifest,
                    &backbone,
                    &train,
                    seed,
                    a.teacher_seed,
                    &out,
                    &dev,
                )?);
            }
        }
        (Some(_), None) | (None, Some(_)) => {
            return usage("--sweep and --values must be given together");
        }
        (None, None) => {
            let variants = [
                VariantSpec::named("baseline", ModalityMode::None, MedAlignMode::Off),
                VariantSpec::named("adapter", ModalityMode::ContinuousCodebook, MedAlignMode::Off),
                VariantSpec::named(
                    "full",
                    ModalityMode::ContinuousCodebook,
                    MedAlignMode::SelectedSubtraction,
                ),
            ];
            for &seed in &seeds {
                for v in &variants {
                    let mut spec = v.clone();
                    spec.name = format!("{}_s{seed}", v.name);
                    let run_dir = out.join(&spec.name);
                    reports.push(run_variant(
                        &spec,
                        &manifest,
                        &backbone,
                        &train,
                        seed,
                        a.teacher_seed,
                        &run_dir,
                        &dev,
                    )?);
                }
            }
        }
    }
    let csv = medreid_core::ablation::reports_csv(&reports);
    std::fs::write(out.join("results.csv"), &csv)?;
    print!("{csv}");
    Ok(ExitCode::SUCCESS)
}
