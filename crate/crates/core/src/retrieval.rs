//! Embedding extraction, nearest-neighbor ranking and CMC Rank-K
//! evaluation. Exhaustive cosine search; galleries here are small.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::data_model::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::model::ReidModel;
use crate::training::{load_record_planes, modality_indices, planes_to_tensor, preprocess_eval};

/// One gallery entry: a unit-norm identity embedding plus metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub record_id: String,
    pub patient_id: String,
    pub modality_label: String,
    pub embedding: Vec<f32>,
}

/// Ranked gallery for one query, scores nonincreasing, self excluded.
#[derive(Debug, Clone)]
pub struct RetrievalResult {
    pub query_id: String,
    /// (gallery record_id, cosine similarity), descending
    pub ranked: Vec<(String, f32)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub split_seed: u64,
    #[serde(rename = "R1")]
    pub r1: f64,
    #[serde(rename = "R5")]
    pub r5: f64,
    #[serde(rename = "R10")]
    pub r10: f64,
    pub num_query: usize,
    pub num_gallery: usize,
}

/// Extracts one embedding per record of `split`. Unreadable images are
/// skipped and counted; more than 1% skipped aborts the run.
pub fn embed_manifest(
    model: &ReidModel,
    manifest: &DatasetManifest,
    split: Split,
    crop: usize,
    slice_sample: usize,
) -> Result<(Vec<EmbeddingRecord>, usize)> {
    let mod_idx = modality_indices(manifest);
    let records: Vec<_> = manifest.records_in_split(split).collect();
    let mut out = Vec::with_capacity(records.len());
    let mut skipped = 0usize;
    for rec in &records {
        let planes = match load_record_planes(rec) {
            Ok(p) => p,
            Err(Error::ImageUnreadable { record_id, reason }) => {
                eprintln!("warning: skipping unreadable record `{record_id}`: {reason}");
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let prepped = preprocess_eval(&planes, crop, slice_sample);
        let t = planes_to_tensor(&prepped, model.dtype(), model.device())?;
        let emb = model.embed_scan(&t, Some(mod_idx[&rec.modality_label]))?;
        out.push(EmbeddingRecord {
            record_id: rec.id.clone(),
            patient_id: rec.patient_id.clone(),
            modality_label: rec.modality_label.clone(),
            embedding: emb.to_dtype(candle_core::DType::F32)?.to_vec1::<f32>()?,
        });
    }
    let total = records.len();
    if total > 0 && (skipped as f64) / (total as f64) > 0.01 {
        return Err(Error::Eval(format!(
            "{skipped} of {total} records unreadable (> 1%)"
        )));
    }
    Ok((out, skipped))
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine ranking of the gallery for one query. Descending by score; ties
/// broken by record_id; the query's own record_id is excluded.
pub fn rank(query: &EmbeddingRecord, gallery: &[EmbeddingRecord]) -> RetrievalResult {
    let mut ranked: Vec<(String, f32)> = gallery
        .iter()
        .filter(|g| g.record_id != query.record_id)
        .map(|g| (g.record_id.clone(), dot(&query.embedding, &g.embedding)))
        .collect();
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    RetrievalResult {
        query_id: query.record_id.clone(),
        ranked,
    }
}

/// Fraction (x100) of queries whose top-k contains a gallery record with the
/// query's patient_id. `patient_of` must cover every id in the results.
pub fn cmc_rank_k(
    results: &[RetrievalResult],
    patient_of: &BTreeMap<String, String>,
    k: usize,
) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Eval("no queries".into()));
    }
    let mut hits = 0usize;
    for res in results {
        let qp = patient_of
            .get(&res.query_id)
            .ok_or_else(|| Error::Eval(format!("unknown query id `{}`", res.query_id)))?;
        let matches = |id: &String| -> Result<bool> {
            let gp = patient_of
                .get(id)
                .ok_or_else(|| Error::Eval(format!("unknown gallery id `{id}`")))?;
            Ok(gp == qp)
        };
        let mut any_in_gallery = false;
        for (id, _) in &res.ranked {
            if matches(id)? {
                any_in_gallery = true;
                break;
            }
        }
        if !any_in_gallery {
            return Err(Error::Eval(format!(
                "query `{}` has no gallery record of patient `{qp}`",
                res.query_id
            )));
        }
        if res.ranked.iter().take(k).map(|(id, _)| matches(id)).collect::<Result<Vec<_>>>()?.iter().any(|&m| m) {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / results.len() as f64)
}

pub fn patient_map(records: &[EmbeddingRecord]) -> BTreeMap<String, String> {
    records
        .iter()
        .map(|r| (r.record_id.clone(), r.patient_id.clone()))
        .collect()
}

/// Full query/gallery evaluation of a model on a manifest.
pub fn evaluate(
    model: &ReidModel,
    manifest: &DatasetManifest,
    crop: usize,
    slice_sample: usize,
    dataset: &str,
    split_seed: u64,
) -> Result<EvalReport> {
    let (queries, _) = embed_manifest(model, manifest, Split::Query, crop, slice_sample)?;
    let (gallery, _) = embed_manifest(model, manifest, Split::Gallery, crop, slice_sample)?;
    report_from_embeddings(&queries, &gallery, dataset, split_seed)
}

pub fn report_from_embeddings(
    queries: &[EmbeddingRecord],
    gallery: &[EmbeddingRecord],
    dataset: &str,
    split_seed: u64,
) -> Result<EvalReport> {
    if gallery.is_empty() {
        return Err(Error::Eval("empty gallery".into()));
    }
    let results: Vec<RetrievalResult> = queries.iter().map(|q| rank(q, gallery)).collect();
    let mut patient_of = patient_map(gallery);
    patient_of.extend(patient_map(queries));
    Ok(EvalReport {
        dataset: dataset.to_string(),
        split_seed,
        r1: cmc_rank_k(&results, &patient_of, 1)?,
        r5: cmc_rank_k(&results, &patient_of, 5)?,
        r10: cmc_rank_k(&results, &patient_of, 10)?,
        num_query: queries.len(),
        num_gallery: gallery.len(),
    })
}

/// Test oracle: patient-identity one-hot embeddings. Retrieval on these is
/// perfect by construction.
pub fn perfect_embeddings(manifest: &DatasetManifest, split: Split) -> Vec<EmbeddingRecord> {
    let mut patients: Vec<&String> = manifest.patients.keys().collect();
    patients.sort();
    let idx: HashMap<&String, usize> = patients.iter().enumerate().map(|(i, p)| (*p, i)).collect();
    let d = patients.len();
    manifest
        .records_in_split(split)
        .map(|r| {
            let mut e = vec![0f32; d];
            e[idx[&r.patient_id]] = 1.0;
            EmbeddingRecord {
                record_id: r.id.clone(),
                patient_id: r.patient_id.clone(),
                modality_label: r.modality_label.clone(),
                embedding: e,
            }
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    /// record_id -> row index in the tensor archive
    rows: BTreeMap<String, usize>,
    patient_ids: BTreeMap<String, String>,
    modality_labels: BTreeMap<String, String>,
}

/// Writes embeddings as a tensor archive (`embeddings` matrix) plus a JSON
/// sidecar mapping record ids to rows.
pub fn save_embeddings(path: &Path, records: &[EmbeddingRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Eval("no embeddings to save".into()));
    }
    let d = records[0].embedding.len();
    let mut data = Vec::with_capacity(records.len() * d);
    let mut sidecar = Sidecar {
        rows: BTreeMap::new(),
        patient_ids: BTreeMap::new(),
        modality_labels: BTreeMap::new(),
    };
    for (i, r) in records.iter().enumerate() {
        if r.embedding.len() != d {
            return Err(Error::Eval("inconsistent embedding dims".into()));
        }
        data.extend_from_slice(&r.embedding);
        sidecar.rows.insert(r.record_id.clone(), i);
        sidecar.patient_ids.insert(r.record_id.clone(), r.patient_id.clone());
        sidecar
            .modality_labels
            .insert(r.record_id.clone(), r.modality_label.clone());
    }
    let t = Tensor::from_vec(data, (records.len(), d), &Device::Cpu)?;
    crate::checkpoint::save_tensors(path, &[("embeddings".to_string(), t)], &BTreeMap::new())?;
    let json = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::Eval(e.to_string()))?;
    std::fs::write(path.with_extension("json"), json)?;
    Ok(())
}

pub fn load_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let (tensors, _) = crate::checkpoint::load_tensors(path, &Device::Cpu)?;
    let t = tensors
        .get("embeddings")
        .ok_or_else(|| Error::Eval("missing `embeddings` tensor".into()))?;
    let rows = t.to_vec2::<f32>()?;
    let json = std::fs::read_to_string(path.with_extension("json"))?;
    let sidecar: Sidecar = serde_json::from_str(&json).map_err(|e| Error::Eval(e.to_string()))?;
    let mut out = Vec::with_capacity(sidecar.rows.len());
    for (id, &row) in &sidecar.rows {
        let embedding = rows
            .get(row)
            .ok_or_else(|| Error::Eval(format!("row {row} out of range for `{id}`")))?
            .clone();
        out.push(EmbeddingRecord {
            record_id: id.clone(),
            patient_id: sidecar.patient_ids[id].clone(),
            modality_label: sidecar.modality_labels[id].clone(),
            embedding,
        });
    }
    Ok(out)
}
